//! Cross-modality prototype collaboration.
//!
//! Each modality keeps one unit-norm prototype per identity. Prototypes are
//! initialized as the normalized mean of that identity's sequence features,
//! then moved each step toward the hardest same-identity sample of the
//! *other* modality in the batch. The collaboration loss contrasts every
//! sample against the in-batch prototypes of both memories.

use std::collections::BTreeMap;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.2;

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > crate::tape::L2_EPS {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Identity prototypes of one modality. Not a trainable parameter: entries
/// change only through [`PrototypeMemory::momentum_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMemory {
    pub modality: Modality,
    pub momentum: f64,
    entries: Vec<Vec<f64>>,
}

/// Unit-norm sequence features of one batch with their labels.
#[derive(Clone, Debug)]
pub struct BatchFeatures {
    /// `[B, d]`, rows unit-norm.
    pub embeddings: Tensor,
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl BatchFeatures {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }
}

impl PrototypeMemory {
    /// Builds a memory from `(identity, embedding)` pairs covering every
    /// identity in `0..identities`: each entry is the normalized mean of that
    /// identity's embeddings.
    pub fn from_embeddings<'a>(
        modality: Modality,
        identities: usize,
        momentum: f64,
        samples: impl IntoIterator<Item = (usize, &'a [f64])>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; identities];
        for (identity, emb) in samples {
            let slot = sums.get_mut(identity).ok_or(Error::Index {
                op: "init_memory",
                index: identity,
                bound: identities,
            })?;
            match slot {
                Some((acc, n)) => {
                    acc.iter_mut().zip(emb).for_each(|(a, b)| *a += b);
                    *n += 1;
                }
                None => *slot = Some((emb.to_vec(), 1)),
            }
        }
        let missing: Vec<usize> = (0..identities).filter(|&i| sums[i].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::MemoryInit {
                modality: modality.tag(),
                identities: missing,
            });
        }
        let entries = sums
            .into_iter()
            .map(|s| {
                let (acc, n) = s.unwrap();
                let mean: Vec<f64> = acc.iter().map(|v| v / n as f64).collect();
                normalized(&mean)
            })
            .collect();
        Ok(Self {
            modality,
            momentum,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    pub fn entry(&self, identity: usize) -> Result<&[f64]> {
        self.entries
            .get(identity)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("identity {identity} absent from {} memory", self.modality)))
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Replaces all entries, e.g. from a checkpoint.
    pub fn set_entries(&mut self, entries: Vec<Vec<f64>>) {
        self.entries = entries;
    }

    /// `entry ← normalize(μ·entry + (1−μ)·b*)`
    pub fn momentum_update(&mut self, identity: usize, b_star: &[f64]) -> Result<&[f64]> {
        let mu = self.momentum;
        let entry = self
            .entries
            .get_mut(identity)
            .ok_or_else(|| Error::Contract(format!("identity {identity} absent from memory")))?;
        if entry.len() != b_star.len() {
            return Err(Error::Shape {
                op: "momentum_update",
                lhs: vec![entry.len()],
                rhs: vec![b_star.len()],
            });
        }
        *entry = normalized(&momentum_blend(entry, b_star, mu));
        Ok(entry)
    }

    /// Index into `batch` of the sample of `identity` from the opposite
    /// modality with the lowest cosine similarity to this memory's prototype.
    /// Ties go to the lowest index.
    pub fn select_hard_cross(&self, batch: &BatchFeatures, identity: usize) -> Result<usize> {
        let source = self.modality.other();
        self.select_hard(batch, identity, source)
    }

    /// As [`Self::select_hard_cross`] but drawing candidates from `source`.
    pub fn select_hard(&self, batch: &BatchFeatures, identity: usize, source: Modality) -> Result<usize> {
        let proto = self.entry(identity)?;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..batch.len() {
            if batch.identities[i] != identity || batch.modalities[i] != source {
                continue;
            }
            let sim = dot(batch.row(i), proto);
            if best.is_none_or(|(_, s)| sim < s) {
                best = Some((i, sim));
            }
        }
        best.map(|(i, _)| i).ok_or(Error::Selection {
            modality: source.tag(),
            identity,
        })
    }

    /// Applies one step of updates for every identity in `batch`, each with
    /// its hard cross-modal sample. With `same_modality`, a second update with
    /// the hard same-modality sample follows. Identities lacking a candidate
    /// are skipped. Returns the identities that were updated.
    pub fn update_from_batch(&mut self, batch: &BatchFeatures, same_modality: bool) -> Result<Vec<usize>> {
        let ids: BTreeMap<usize, ()> = batch.identities.iter().map(|&i| (i, ())).collect();
        let mut updated = Vec::new();
        for &identity in ids.keys() {
            match self.select_hard_cross(batch, identity) {
                Ok(i) => {
                    let b = batch.row(i).to_vec();
                    self.momentum_update(identity, &b)?;
                    updated.push(identity);
                }
                Err(Error::Selection { .. }) => {}
                Err(e) => return Err(e),
            }
            if same_modality {
                if let Ok(i) = self.select_hard(batch, identity, self.modality) {
                    let b = batch.row(i).to_vec();
                    self.momentum_update(identity, &b)?;
                }
            }
        }
        Ok(updated)
    }

    /// `[P, d]` prototypes of `identities`, in order.
    pub fn gather(&self, identities: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(identities.len() * self.dim());
        for &i in identities {
            data.extend_from_slice(self.entry(i)?);
        }
        Tensor::new(vec![identities.len(), self.dim()], data)
    }
}

/// Distinct identities of a batch in ascending order.
pub fn batch_identities(identities: &[usize]) -> Vec<usize> {
    let mut ids = identities.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// `μ·m + (1−μ)·b`, the update before renormalization.
pub fn momentum_blend(m: &[f64], b: &[f64], mu: f64) -> Vec<f64> {
    m.iter().zip(b).map(|(m, b)| mu * m + (1.0 - mu) * b).collect()
}

/// Collaboration loss of unit-norm features `b` (`[B, d]` on the tape)
/// against the prototypes of the `P` distinct batch identities in both
/// memories: the mean of the two per-memory softmax cross-entropies of
/// `b·Mᵀ/τ`. Prototypes enter as constants.
pub fn cpcl_loss(
    tape: &mut Tape,
    b: Var,
    identities: &[usize],
    vis: &PrototypeMemory,
    ir: &PrototypeMemory,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let ids = batch_identities(identities);
    let labels: Vec<usize> = identities
        .iter()
        .map(|i| ids.binary_search(i).expect("identity from batch"))
        .collect();
    let mut terms = Vec::with_capacity(2);
    for memory in [vis, ir] {
        let protos = memory.gather(&ids)?;
        let protos_t = {
            let (p, d) = (protos.shape()[0], protos.shape()[1]);
            let mut t = vec![0.0; p * d];
            for i in 0..p {
                for j in 0..d {
                    t[j * p + i] = protos.data()[i * d + j];
                }
            }
            tape.constant(Tensor::new(vec![d, p], t)?)
        };
        let sims = tape.matmul(b, protos_t)?;
        let logits = tape.scale(sims, 1.0 / temperature);
        terms.push(tape.cross_entropy_logits(logits, &labels)?);
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, 0.5))
}
