//! Batch-hard triplet loss and identity classification loss.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.3;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hardest positive and hardest negative for every anchor, by Euclidean
/// distance over all samples regardless of modality. Ties go to the lower
/// index.
pub fn hardest_pairs(features: &Tensor, identities: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = identities.len();
    if features.rank() != 2 || features.shape()[0] != n {
        return Err(Error::Shape {
            op: "triplet_loss",
            lhs: features.shape().to_vec(),
            rhs: vec![n],
        });
    }
    (0..n)
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in (0..n).filter(|&j| j != a) {
                let d = euclidean(features.row(a), features.row(j));
                if identities[j] == identities[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            match (pos, neg) {
                (Some((p, _)), Some((q, _))) => Ok((p, q)),
                (None, _) => Err(Error::Contract(format!(
                    "identity {} has a single sample in the batch",
                    identities[a]
                ))),
                (_, None) => Err(Error::Contract("batch contains a single identity".into())),
            }
        })
        .collect()
}

fn row_distances(tape: &mut Tape, x: Var, a: &[usize], b: &[usize]) -> Result<Var> {
    let xa = tape.gather_rows(x, a)?;
    let xb = tape.gather_rows(x, b)?;
    let diff = tape.sub(xa, xb)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq, 1)?;
    Ok(tape.sqrt(s))
}

/// Batch-hard triplet loss: mean over anchors of
/// `max(0, d(a, hardest positive) − d(a, hardest negative) + margin)`.
pub fn triplet_loss(tape: &mut Tape, features: Var, identities: &[usize], margin: f64) -> Result<Var> {
    let pairs = hardest_pairs(tape.value(features), identities)?;
    let anchors: Vec<usize> = (0..identities.len()).collect();
    let positives: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let negatives: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let dp = row_distances(tape, features, &anchors, &positives)?;
    let dn = row_distances(tape, features, &anchors, &negatives)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean_all(hinge))
}

/// Cross-entropy of a shared linear classifier over identity labels.
pub fn id_loss(tape: &mut Tape, p: &Bound, classifier: &Linear, features: Var, identities: &[usize]) -> Result<Var> {
    let logits = classifier.forward(tape, p, features)?;
    tape.cross_entropy_logits(logits, identities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_anchor() {
        // 1-D features: anchor 0, positives at 0.2 and 0.5, negatives at
        // -0.6 and 0.9; margin 0.3 → 0.5 - 0.6 + 0.3 = 0.2
        let f = Tensor::new(vec![5, 1], vec![0.0, 0.2, 0.5, -0.6, 0.9]).unwrap();
        let ids = [0, 0, 0, 1, 1];
        let pairs = hardest_pairs(&f, &ids).unwrap();
        assert_eq!(pairs[0], (2, 3));
        let mut tape = Tape::new();
        let x = tape.leaf(f);
        let dp = row_distances(&mut tape, x, &[0], &[2]).unwrap();
        let dn = row_distances(&mut tape, x, &[0], &[3]).unwrap();
        let per_anchor = (tape.value(dp).item() - tape.value(dn).item() + 0.3).max(0.0);
        assert!((per_anchor - 0.2).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_give_zero() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.0, 5.1]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(f);
        let l = triplet_loss(&mut tape, x, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn singleton_identity_is_rejected() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(hardest_pairs(&f, &[0, 0, 1]), Err(Error::Contract(_))));
        assert!(matches!(hardest_pairs(&f, &[0, 0, 0]), Err(Error::Contract(_))));
    }
}
