//! Inference-time feature extraction and retrieval evaluation.

use std::fmt::Write as _;

use crate::data::{Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Entry, MetricsReport, Protocol, RetrievalRun, EVAL_HEADER};
use crate::model::Model;

const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub modality: Modality,
    pub clip_id: usize,
}

/// Unit-norm retrieval embeddings (sequence feature concatenated with the
/// fused interaction output) for every clip of `split`. CII is not run.
pub fn extract_features(model: &Model, dataset: &Dataset, split: Split) -> Result<Vec<FeatureRow>> {
    let enc = &model.config.encoder;
    if dataset.height != enc.height || dataset.width != enc.width || dataset.frames != model.config.frames {
        return Err(Error::Load(format!(
            "model expects {} frames of {}x{}, dataset has {} frames of {}x{}",
            model.config.frames, enc.height, enc.width, dataset.frames, dataset.height, dataset.width
        )));
    }
    let clips = dataset.split(split);
    let mut rows = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EXTRACT_CHUNK) {
        let emb = model.embed(chunk)?;
        for (i, clip) in chunk.iter().enumerate() {
            rows.push(FeatureRow {
                embedding: emb.row(i).to_vec(),
                identity: clip.identity,
                modality: clip.modality,
                clip_id: clip.id,
            });
        }
    }
    Ok(rows)
}

pub fn retrieval_run(features: &[FeatureRow], protocol: Protocol) -> RetrievalRun {
    let (query_mod, gallery_mod) = match protocol {
        Protocol::I2V => (Modality::Infrared, Modality::Visible),
        Protocol::V2I => (Modality::Visible, Modality::Infrared),
    };
    let pick = |m: Modality| -> Vec<Entry> {
        features
            .iter()
            .filter(|f| f.modality == m)
            .map(|f| Entry {
                embedding: f.embedding.clone(),
                identity: f.identity,
                clip_id: f.clip_id,
            })
            .collect()
    };
    RetrievalRun {
        protocol,
        queries: pick(query_mod),
        gallery: pick(gallery_mod),
    }
}

/// I2V and V2I metrics of `model` on `split`.
pub fn evaluate_model(model: &Model, dataset: &Dataset, split: Split) -> Result<[MetricsReport; 2]> {
    let features = extract_features(model, dataset, split)?;
    let i2v = evaluate(&retrieval_run(&features, Protocol::I2V))?;
    let v2i = evaluate(&retrieval_run(&features, Protocol::V2I))?;
    Ok([i2v, v2i])
}

pub fn eval_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Mean over identities of the cosine distance between the identity's
/// visible and infrared feature centroids.
pub fn modality_gap(features: &[FeatureRow]) -> f64 {
    let mut ids: Vec<usize> = features.iter().map(|f| f.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let centroid = |id: usize, m: Modality| -> Option<Vec<f64>> {
        let rows: Vec<&FeatureRow> = features.iter().filter(|f| f.identity == id && f.modality == m).collect();
        let first = rows.first()?;
        let mut acc = vec![0.0; first.embedding.len()];
        for r in &rows {
            acc.iter_mut().zip(&r.embedding).for_each(|(a, b)| *a += b);
        }
        Some(acc.iter().map(|v| v / rows.len() as f64).collect())
    };
    let gaps: Vec<f64> = ids
        .iter()
        .filter_map(|&id| {
            let v = centroid(id, Modality::Visible)?;
            let i = centroid(id, Modality::Infrared)?;
            Some(crate::metrics::cosine_distance(&v, &i))
        })
        .collect();
    gaps.iter().sum::<f64>() / gaps.len().max(1) as f64
}
