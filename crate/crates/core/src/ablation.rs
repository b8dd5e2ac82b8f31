//! Variant grids trained and evaluated under shared seeds.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::metrics::{MetricsReport, Protocol};
use crate::model::Toggles;
use crate::trainer::{train, TrainConfig};

pub const SEEDS: [u64; 3] = [1, 2, 3];
pub const ABLATE_HEADER: &str = "variant,protocol,rank1,rank5,rank20,map,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
    pub sii_stride: Option<usize>,
    pub lii_stride: Option<usize>,
}

impl Variant {
    fn new(name: impl Into<String>, toggles: Toggles) -> Self {
        Self {
            name: name.into(),
            toggles,
            sii_stride: None,
            lii_stride: None,
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            toggles: self.toggles,
            sii_stride: self.sii_stride.unwrap_or(base.sii_stride),
            lii_stride: self.lii_stride.unwrap_or(base.lii_stride),
            eval_each_epoch: false,
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Modules,
    Interactions,
    SiiStride,
    LiiStride,
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::Modules, Grid::Interactions, Grid::SiiStride, Grid::LiiStride];

    pub fn name(&self) -> &'static str {
        match self {
            Grid::Modules => "modules",
            Grid::Interactions => "interactions",
            Grid::SiiStride => "sii_stride",
            Grid::LiiStride => "lii_stride",
        }
    }

    pub fn parse(s: &str) -> Option<Grid> {
        Grid::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn variants(&self) -> Vec<Variant> {
        match self {
            Grid::Modules => vec![
                Variant::new("baseline", Toggles::NONE),
                Variant::new("+cpc", Toggles { cpc: true, ..Toggles::NONE }),
                Variant::new("+cpc+mii", Toggles::ALL),
            ],
            // Every SII/LII/CII combination on top of the baseline.
            Grid::Interactions => (0..8)
                .map(|bits| {
                    let t = Toggles {
                        cpc: false,
                        sii: bits & 1 != 0,
                        lii: bits & 2 != 0,
                        cii: bits & 4 != 0,
                    };
                    let mut name: Vec<&str> = Vec::new();
                    for (on, tag) in [(t.sii, "sii"), (t.lii, "lii"), (t.cii, "cii")] {
                        if on {
                            name.push(tag);
                        }
                    }
                    let name = if name.is_empty() { "none".to_string() } else { name.join("+") };
                    Variant::new(name, t)
                })
                .collect(),
            Grid::SiiStride => (1..=4)
                .map(|s| Variant {
                    sii_stride: Some(s),
                    ..Variant::new(format!("sii_s{s}"), Toggles::ALL)
                })
                .collect(),
            Grid::LiiStride => (0..=4)
                .map(|s| Variant {
                    lii_stride: Some(s),
                    ..Variant::new(format!("lii_s{s}"), Toggles::ALL)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Trains every (variant, seed) pair in parallel; rows come back in variant,
/// seed, protocol order regardless of scheduling.
pub fn run_variants(dataset: &Dataset, base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if dataset.clips_per_modality <= dataset.train_clips() {
        return Err(Error::Config("dataset has no test clips to evaluate on".into()));
    }
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<Vec<AblationRow>>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let outcome = train(dataset, &v.apply(base, seed))?;
            let reports = evaluate_model(&outcome.model, dataset, Split::Test)?;
            Ok(reports
                .into_iter()
                .map(|report| AblationRow {
                    variant: v.name.clone(),
                    seed,
                    report,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len() * 2);
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn run_grid(dataset: &Dataset, base: &TrainConfig, grid: Grid, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    run_variants(dataset, base, &grid.variants(), seeds)
}

/// Mean mAP of `variant` under `protocol` over all seeds present in `rows`.
pub fn mean_map(rows: &[AblationRow], variant: &str, protocol: Protocol) -> Option<f64> {
    let maps: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant && r.report.protocol == protocol)
        .map(|r| r.report.map)
        .collect();
    (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64)
}

pub fn ablate_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATE_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.report;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.variant, m.protocol, m.rank1, m.rank5, m.rank20, m.map, r.seed
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(Grid::Modules.variants().len(), 3);
        assert_eq!(Grid::Interactions.variants().len(), 8);
        assert_eq!(Grid::Interactions.variants()[0].toggles, Toggles::NONE);
        assert_eq!(Grid::SiiStride.variants().len(), 4);
        let lii: Vec<usize> = Grid::LiiStride.variants().iter().map(|v| v.lii_stride.unwrap()).collect();
        assert_eq!(lii, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn grid_names_round_trip() {
        for g in Grid::ALL {
            assert_eq!(Grid::parse(g.name()), Some(g));
        }
        assert_eq!(Grid::parse("table9"), None);
    }
}
