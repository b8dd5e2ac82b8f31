//! PK sampling of two-modality batches.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::data::{Dataset, Modality, Split, VideoClip};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    /// Identities per batch.
    pub p: usize,
    /// Clips per modality per identity.
    pub k: usize,
    /// Frames per clip.
    pub t: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 4, k: 2, t: 4 }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k * 2
    }
}

/// Draws `P` identities without replacement and, for each, `K` visible then
/// `K` infrared clips without replacement. Clips come out grouped by
/// identity in draw order.
pub fn sample_batch<'a>(dataset: &'a Dataset, split: Split, spec: BatchSpec, rng: &mut impl Rng) -> Result<Vec<&'a VideoClip>> {
    if spec.p == 0 || spec.k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    if spec.t != dataset.frames {
        return Err(Error::Sampling(format!(
            "batch wants {} frames per clip, dataset has {}",
            spec.t, dataset.frames
        )));
    }
    let mut eligible = Vec::new();
    let mut short = Vec::new();
    for identity in 0..dataset.identities {
        let lacking: Vec<Modality> = Modality::BOTH
            .into_iter()
            .filter(|&m| dataset.clips_of(identity, m, split).len() < spec.k)
            .collect();
        if lacking.is_empty() {
            eligible.push(identity);
        } else {
            short.extend(lacking.into_iter().map(|m| format!("{identity}/{m}")));
        }
    }
    if eligible.len() < spec.p {
        return Err(Error::Sampling(format!(
            "need {} identities with {} clips per modality, found {}; short: {}",
            spec.p,
            spec.k,
            eligible.len(),
            short.join(", ")
        )));
    }
    let chosen: Vec<usize> = eligible.choose_multiple(rng, spec.p).copied().collect();
    let mut batch = Vec::with_capacity(spec.batch_size());
    for identity in chosen {
        for modality in Modality::BOTH {
            let pool = dataset.clips_of(identity, modality, split);
            batch.extend(pool.choose_multiple(rng, spec.k).copied());
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(identities: usize) -> Dataset {
        generate(&SynthConfig {
            identities,
            clips_per_modality: 4,
            frames: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn counts() {
        let ds = dataset(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&ds, Split::Train, BatchSpec::default(), &mut rng).unwrap();
        assert_eq!(batch.len(), 16);
        assert_eq!(batch.iter().filter(|c| c.modality == Modality::Visible).count(), 8);
        let mut ids: Vec<usize> = batch.iter().map(|c| c.identity).collect();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        for id in ids {
            assert_eq!(batch.iter().filter(|c| c.identity == id).count(), 4);
        }
        let mut clip_ids: Vec<usize> = batch.iter().map(|c| c.id).collect();
        clip_ids.sort();
        clip_ids.dedup();
        assert_eq!(clip_ids.len(), 16);
    }

    #[test]
    fn exact_p_uses_every_identity_and_is_seeded() {
        let ds = dataset(4);
        let spec = BatchSpec::default();
        let a = sample_batch(&ds, Split::Train, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut ids: Vec<usize> = a.iter().map(|c| c.identity).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        let b = sample_batch(&ds, Split::Train, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ids_a: Vec<usize> = a.iter().map(|c| c.id).collect();
        let ids_b: Vec<usize> = b.iter().map(|c| c.id).collect();
        assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn insufficient_clips() {
        let ds = dataset(3);
        let err = sample_batch(&ds, Split::Train, BatchSpec::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Sampling(_))));
        let err = sample_batch(&ds, Split::Train, BatchSpec { p: 2, k: 3, t: 4 }, &mut ChaCha8Rng::seed_from_u64(0));
        match err {
            Err(Error::Sampling(msg)) => assert!(msg.contains("0/vis"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
