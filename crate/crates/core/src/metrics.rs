//! CMC and mAP for cross-modality retrieval.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::dot;

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Infrared queries against a visible gallery.
    I2V,
    /// Visible queries against an infrared gallery.
    V2I,
}

impl Protocol {
    pub const BOTH: [Protocol; 2] = [Protocol::I2V, Protocol::V2I];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::I2V => "I2V",
            Protocol::V2I => "V2I",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub clip_id: usize,
}

#[derive(Clone, Debug)]
pub struct RetrievalRun {
    pub protocol: Protocol,
    pub queries: Vec<Entry>,
    pub gallery: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub rank1: f64,
    pub rank5: f64,
    pub rank20: f64,
    pub map: f64,
    pub average_precisions: Vec<f64>,
}

pub const EVAL_HEADER: &str = "protocol,rank1,rank5,rank20,map";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.protocol, self.rank1, self.rank5, self.rank20, self.map
        )
    }
}

/// `1 − cos(a, b)`, with zero vectors treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

/// Gallery indices by ascending cosine distance to `query`, ties by clip id.
pub fn rank_gallery(query: &Entry, gallery: &[Entry]) -> Vec<usize> {
    let dist: Vec<f64> = gallery
        .iter()
        .map(|g| cosine_distance(&query.embedding, &g.embedding))
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .partial_cmp(&dist[b])
            .unwrap_or(Ordering::Equal)
            .then(gallery[a].clip_id.cmp(&gallery[b].clip_id))
    });
    order
}

impl RetrievalRun {
    fn check(&self) -> Result<()> {
        for q in &self.queries {
            if !self.gallery.iter().any(|g| g.identity == q.identity) {
                return Err(Error::Protocol(q.identity));
            }
        }
        if self.queries.is_empty() {
            return Err(Error::Contract("retrieval run without queries".into()));
        }
        Ok(())
    }

    /// Relevance of the ranked gallery for each query.
    fn relevance(&self) -> Vec<Vec<bool>> {
        self.queries
            .iter()
            .map(|q| {
                rank_gallery(q, &self.gallery)
                    .into_iter()
                    .map(|g| self.gallery[g].identity == q.identity)
                    .collect()
            })
            .collect()
    }
}

/// Fraction of queries with a correct match among the top `k`, per `k`.
pub fn cmc(run: &RetrievalRun, ks: &[usize]) -> Result<Vec<f64>> {
    run.check()?;
    let first_hits: Vec<usize> = run
        .relevance()
        .iter()
        .map(|rel| rel.iter().position(|&r| r).expect("checked"))
        .collect();
    let n = first_hits.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| first_hits.iter().filter(|&&pos| pos < k).count() as f64 / n)
        .collect())
}

/// Mean average precision, and the per-query APs.
pub fn mean_ap(run: &RetrievalRun) -> Result<(f64, Vec<f64>)> {
    run.check()?;
    let aps: Vec<f64> = run
        .relevance()
        .iter()
        .map(|rel| {
            let mut hits = 0usize;
            let mut acc = 0.0;
            for (r, _) in rel.iter().enumerate().filter(|(_, &x)| x) {
                hits += 1;
                acc += hits as f64 / (r + 1) as f64;
            }
            acc / hits as f64
        })
        .collect();
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok((map, aps))
}

pub fn evaluate(run: &RetrievalRun) -> Result<MetricsReport> {
    let ranks = cmc(run, &DEFAULT_RANKS)?;
    let (map, average_precisions) = mean_ap(run)?;
    Ok(MetricsReport {
        protocol: run.protocol,
        rank1: ranks[0],
        rank5: ranks[1],
        rank20: ranks[2],
        map,
        average_precisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(x: f64, y: f64, identity: usize, clip_id: usize) -> Entry {
        Entry {
            embedding: vec![x, y],
            identity,
            clip_id,
        }
    }

    fn run(queries: Vec<Entry>, gallery: Vec<Entry>) -> RetrievalRun {
        RetrievalRun {
            protocol: Protocol::I2V,
            queries,
            gallery,
        }
    }

    #[test]
    fn separable_gallery_is_perfect() {
        let r = run(
            vec![entry(1.0, 0.0, 0, 10), entry(0.0, 1.0, 1, 11)],
            vec![entry(1.0, 0.1, 0, 0), entry(0.1, 1.0, 1, 1), entry(-1.0, 0.0, 2, 2)],
        );
        let m = evaluate(&r).unwrap();
        assert_eq!((m.rank1, m.map), (1.0, 1.0));
    }

    #[test]
    fn first_match_at_third_position() {
        let r = run(
            vec![entry(1.0, 0.0, 0, 10)],
            vec![
                entry(1.0, 0.05, 1, 0),
                entry(1.0, 0.2, 2, 1),
                entry(1.0, 0.5, 0, 2),
                entry(-1.0, 0.0, 3, 3),
            ],
        );
        assert_eq!(cmc(&r, &[1, 5]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn ap_of_ranks_one_and_three() {
        let r = run(
            vec![entry(1.0, 0.0, 0, 10)],
            vec![
                entry(1.0, 0.0, 0, 0),
                entry(1.0, 0.2, 1, 1),
                entry(1.0, 0.5, 0, 2),
                entry(-1.0, 0.0, 1, 3),
            ],
        );
        let (map, aps) = mean_ap(&r).unwrap();
        assert!((map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(aps.len(), 1);
    }

    #[test]
    fn ties_break_by_clip_id() {
        let q = entry(1.0, 0.0, 0, 99);
        let g = vec![entry(2.0, 0.0, 1, 7), entry(1.0, 0.0, 0, 3)];
        assert_eq!(rank_gallery(&q, &g), vec![1, 0]);
    }

    #[test]
    fn missing_identity_is_a_protocol_error() {
        let r = run(vec![entry(1.0, 0.0, 5, 0)], vec![entry(1.0, 0.0, 1, 1)]);
        assert!(matches!(cmc(&r, &[1]), Err(Error::Protocol(5))));
        assert!(matches!(mean_ap(&r), Err(Error::Protocol(5))));
    }
}
