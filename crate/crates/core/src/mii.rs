//! Multi-granularity information interaction.
//!
//! * SII: each frame's [CLS] token cross-attends to its own patch tokens after
//!   a channel exchange with the neighbouring frames.
//! * LII: each frame's [CLS] token cross-attends to the unexchanged patch
//!   tokens of the frame `S` steps ahead (cyclically).
//! * CII: a sequence feature of one modality is prepended to every frame's
//!   patch tokens of a same-identity clip of the other modality and passed
//!   through a self-attention block; the per-frame outputs are averaged.
//!
//! All tensors are batched: `B` clips of `T` frames with `N` patches, rows
//! ordered clip-major, then frame, then patch.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::tap;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, BlockOutput};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_SII_STRIDE: usize = 1;
pub const DEFAULT_LII_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipLayout {
    pub clips: usize,
    pub frames: usize,
    pub patches: usize,
}

impl ClipLayout {
    fn patch_row(&self, clip: usize, frame: usize, patch: usize) -> usize {
        (clip * self.frames + frame) * self.patches + patch
    }
}

/// Source frame for the first channel quarter (`backward`) or second channel
/// quarter (forward) of frame `t`; missing neighbours fall back to `t`.
pub fn exchange_source(t: usize, stride: usize, frames: usize, backward: bool) -> usize {
    if backward {
        t.checked_sub(stride).unwrap_or(t)
    } else if t + stride < frames {
        t + stride
    } else {
        t
    }
}

/// Frame whose patches the [CLS] token of frame `t` attends to in LII.
pub fn lii_source(t: usize, stride: usize, frames: usize) -> usize {
    (t + stride) % frames
}

/// Rebuilds every frame's patch tokens from channel slices of itself and its
/// neighbours: channels `[0, D/4)` from frame `t−S`, `[D/4, D/2)` from frame
/// `t+S`, the rest from frame `t`. `patches` is `[B·T·N, D]`.
pub fn channel_exchange(tape: &mut Tape, patches: Var, layout: ClipLayout, stride: usize) -> Result<Var> {
    let d = tape.shape(patches)[1];
    if d % 4 != 0 {
        return Err(Error::Config(format!("channel exchange needs width divisible by 4, got {d}")));
    }
    let rows = layout.clips * layout.frames * layout.patches;
    if tape.shape(patches)[0] != rows {
        return Err(Error::Shape {
            op: "channel_exchange",
            lhs: tape.shape(patches).to_vec(),
            rhs: vec![rows, d],
        });
    }
    let index = |backward: bool| -> Vec<usize> {
        let mut idx = Vec::with_capacity(rows);
        for b in 0..layout.clips {
            for t in 0..layout.frames {
                let src = exchange_source(t, stride, layout.frames, backward);
                idx.extend((0..layout.patches).map(|n| layout.patch_row(b, src, n)));
            }
        }
        idx
    };
    let prev = tape.gather_rows(patches, &index(true))?;
    let next = tape.gather_rows(patches, &index(false))?;
    let a = tape.slice(prev, 1, 0, d / 4)?;
    let b = tape.slice(next, 1, d / 4, d / 2)?;
    let c = tape.slice(patches, 1, d / 2, d)?;
    tape.concat(&[a, b, c], 1)
}

/// Single-clip form of [`channel_exchange`] on a `[T, N, D]` tensor.
pub fn channel_exchange_clip(tape: &mut Tape, patches: Var, stride: usize) -> Result<Var> {
    let shape = tape.shape(patches).to_vec();
    let [t, n, d] = shape[..] else {
        return Err(Error::Shape {
            op: "channel_exchange",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    };
    let flat = tape.reshape(patches, &[t * n, d])?;
    let layout = ClipLayout {
        clips: 1,
        frames: t,
        patches: n,
    };
    let out = channel_exchange(tape, flat, layout, stride)?;
    tape.reshape(out, &[t, n, d])
}

/// Mean over frames of `short + long`, either of which may be absent.
/// Inputs are `[B·T, D]`; output is `[B, D]`.
pub fn fuse(tape: &mut Tape, short: Option<Var>, long: Option<Var>, clips: usize, frames: usize) -> Result<Var> {
    let summed = match (short, long) {
        (Some(s), Some(l)) => tape.add(s, l)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(Error::Contract("fuse needs at least one branch".into())),
    };
    tap(tape, summed, clips, frames)
}

/// Mean squared L2 distance between matching rows of `before` and `after`.
pub fn cmcl_term(tape: &mut Tape, before: Var, after: Var) -> Result<Var> {
    let diff = tape.sub(before, after)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum(sq, 1)?;
    Ok(tape.mean_all(per_row))
}

/// Average of [`cmcl_term`] over `(before, after)` pairs.
pub fn cmcl_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("constraint loss over zero pairs".into()));
    }
    let mut total: Option<Var> = None;
    for &(before, after) in pairs {
        let term = cmcl_term(tape, before, after)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / pairs.len() as f64))
}

/// For each clip, the batch index of its CII partner: the same-identity clip
/// of the other modality with the lowest index.
pub fn cii_partners(identities: &[usize], modalities: &[crate::data::Modality]) -> Result<Vec<usize>> {
    (0..identities.len())
        .map(|i| {
            (0..identities.len())
                .find(|&j| identities[j] == identities[i] && modalities[j] != modalities[i])
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "clip {i} of identity {} has no cross-modality partner in the batch",
                        identities[i]
                    ))
                })
        })
        .collect()
}

/// Interaction blocks shared by both modalities.
#[derive(Debug)]
pub struct Mii {
    pub sii: AttentionBlock,
    pub lii: AttentionBlock,
    pub cii: AttentionBlock,
    cii_calls: AtomicUsize,
}

impl Clone for Mii {
    fn clone(&self) -> Self {
        Self {
            sii: self.sii.clone(),
            lii: self.lii.clone(),
            cii: self.cii.clone(),
            cii_calls: AtomicUsize::new(self.cii_calls()),
        }
    }
}

impl Mii {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            sii: AttentionBlock::new(store, "mii.sii", dim, heads, true, &mut rng),
            lii: AttentionBlock::new(store, "mii.lii", dim, heads, true, &mut rng),
            cii: AttentionBlock::new(store, "mii.cii", dim, heads, false, &mut rng),
            cii_calls: AtomicUsize::new(0),
        }
    }

    /// How many times the CII block has been evaluated.
    pub fn cii_calls(&self) -> usize {
        self.cii_calls.load(Ordering::Relaxed)
    }

    /// Short-term interaction: `cls` `[B·T, D]` queries its own frame's
    /// `exchanged` patches `[B·T·N, D]`. Returns `[B·T, D]`.
    pub fn sii_block(&self, tape: &mut Tape, p: &Bound, cls: Var, exchanged: Var, layout: ClipLayout) -> Result<BlockOutput> {
        let groups = layout.clips * layout.frames;
        self.sii
            .forward_cross(tape, p, cls, exchanged, groups, 1, layout.patches)
    }

    /// Long-term interaction: the [CLS] token of frame `t` queries the
    /// patches of frame `(t + S) mod T`. Requires `S < T`.
    pub fn lii_block(&self, tape: &mut Tape, p: &Bound, cls: Var, patches: Var, layout: ClipLayout, stride: usize) -> Result<BlockOutput> {
        if stride >= layout.frames {
            return Err(Error::Config(format!(
                "LII stride {stride} must be below the clip length {}",
                layout.frames
            )));
        }
        self.lii_cyclic(tape, p, cls, patches, layout, stride)
    }

    fn lii_cyclic(&self, tape: &mut Tape, p: &Bound, cls: Var, patches: Var, layout: ClipLayout, stride: usize) -> Result<BlockOutput> {
        let mut index = Vec::with_capacity(layout.clips * layout.frames * layout.patches);
        for b in 0..layout.clips {
            for t in 0..layout.frames {
                let src = lii_source(t, stride, layout.frames);
                index.extend((0..layout.patches).map(|n| layout.patch_row(b, src, n)));
            }
        }
        let context = tape.gather_rows(patches, &index)?;
        self.lii
            .forward_cross(tape, p, cls, context, layout.clips * layout.frames, 1, layout.patches)
    }

    /// Cross-modality interaction. `own` is `[B, D]` (one sequence feature per
    /// clip); `patches` holds the patch tokens of all clips of the batch and
    /// `partners[b]` names the clip whose frames feature `b` is paired with.
    /// Returns `[B, D]`, the frame-averaged position-0 outputs.
    pub fn cii_block(&self, tape: &mut Tape, p: &Bound, own: Var, patches: Var, partners: &[usize], layout: ClipLayout) -> Result<Var> {
        self.cii_calls.fetch_add(1, Ordering::Relaxed);
        let clips = tape.shape(own)[0];
        if partners.len() != clips || partners.iter().any(|&j| j >= layout.clips) {
            return Err(Error::Contract("CII partner list does not match the batch".into()));
        }
        let tokens = 1 + layout.patches;
        let stacked = tape.concat(&[own, patches], 0)?;
        let mut index = Vec::with_capacity(clips * layout.frames * tokens);
        for (b, &partner) in partners.iter().enumerate() {
            for t in 0..layout.frames {
                index.push(b);
                index.extend((0..layout.patches).map(|n| clips + layout.patch_row(partner, t, n)));
            }
        }
        let x = tape.gather_rows(stacked, &index)?;
        let out = self.cii.forward_self(tape, p, x, clips * layout.frames, tokens)?.out;
        let heads: Vec<usize> = (0..clips * layout.frames).map(|g| g * tokens).collect();
        let frame_level = tape.gather_rows(out, &heads)?;
        tap(tape, frame_level, clips, layout.frames)
    }
}
