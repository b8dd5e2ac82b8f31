//! Small ViT-style frame encoder shared by both modalities.
//!
//! Each frame is cut into `N` non-overlapping `P×P` patches, linearly
//! embedded, prefixed with a learned [CLS] token (plus a learned per-modality
//! offset), given learned positional embeddings, and passed through `L`
//! pre-norm transformer layers. The final [CLS] token is projected to the
//! `d`-dimensional embedding space; temporal average pooling over frames
//! yields the sequence-level feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Modality, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, LayerNorm, Linear, INIT_STD};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Token width `D`.
    pub dim: usize,
    /// Embedding width `d` of the projected [CLS] token.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 16,
            patch: 8,
            dim: 64,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}px patches",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim < 2 || self.embed_dim == 0 {
            return Err(Error::Config("token and embedding widths must be positive".into()));
        }
        Ok(())
    }

    /// Number of patches per frame.
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }
}

/// Encoder output for a batch of clips with `T` frames each.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B·T, D]` final [CLS] tokens, clip-major.
    pub cls: Var,
    /// `[B·T·N, D]` final patch tokens.
    pub patches: Var,
    /// `[B·T, d]` projected frame embeddings.
    pub frame_embeddings: Var,
    /// `[B, d]` temporal average of the frame embeddings.
    pub sequence: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch_embed: Linear,
    cls_token: ParamId,
    modality_embed: ParamId,
    positions: ParamId,
    layers: Vec<AttentionBlock>,
    norm_out: LayerNorm,
    projection: Linear,
}

/// Fixed input standardization applied before patchifying.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Splits an `H×W` frame into raster-ordered `P×P` patches, each flattened
/// row-major, giving `[N, P·P]`.
pub fn patchify(frame: &[f64], config: &EncoderConfig) -> Result<Tensor> {
    let (h, w, p) = (config.height, config.width, config.patch);
    if frame.len() != h * w {
        return Err(Error::Config(format!(
            "frame has {} pixels, encoder expects {h}x{w}",
            frame.len()
        )));
    }
    let mut out = Vec::with_capacity(h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for y in 0..p {
                let row = (py * p + y) * w + px * p;
                out.extend_from_slice(&frame[row..row + p]);
            }
        }
    }
    Tensor::new(vec![config.patches(), p * p], out)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let tokens = 1 + config.patches();
        let patch_embed = Linear::new(store, "enc.patch_embed", config.patch_len(), d, &mut rng);
        let cls_token = store.add("enc.cls", trunc_normal(&[d], INIT_STD, &mut rng));
        let modality_embed = store.add("enc.modality", trunc_normal(&[2, d], INIT_STD, &mut rng));
        let positions = store.add("enc.positions", trunc_normal(&[tokens, d], INIT_STD, &mut rng));
        let layers = (0..config.layers)
            .map(|l| AttentionBlock::new(store, &format!("enc.layer{l}"), d, config.heads, false, &mut rng))
            .collect();
        let norm_out = LayerNorm::new(store, "enc.norm_out", d);
        let projection = Linear::new(store, "enc.proj", d, config.embed_dim, &mut rng);
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            modality_embed,
            positions,
            layers,
            norm_out,
            projection,
        })
    }

    /// Patchified pixels of every frame of `clips`, `[B·T·N, P·P]`.
    pub fn patch_matrix(&self, clips: &[&VideoClip], frames: usize) -> Result<Tensor> {
        let frame_len = self.config.height * self.config.width;
        let mut data = Vec::with_capacity(clips.len() * frames * frame_len);
        for clip in clips {
            if clip.pixels.len() != frames * frame_len {
                return Err(Error::Config(format!(
                    "clip {} has {} pixels, expected {frames} frames of {}x{}",
                    clip.id,
                    clip.pixels.len(),
                    self.config.height,
                    self.config.width
                )));
            }
            for t in 0..frames {
                let frame: Vec<f64> = clip
                    .frame(t, frame_len)
                    .iter()
                    .map(|&v| (f64::from(v) - PIXEL_MEAN) / PIXEL_STD)
                    .collect();
                data.extend(patchify(&frame, &self.config)?.into_data());
            }
        }
        Tensor::new(
            vec![clips.len() * frames * self.config.patches(), self.config.patch_len()],
            data,
        )
    }

    /// Encodes `F` frames given as a `[F·N, P·P]` patch matrix (a tape node,
    /// so pixel gradients are available) with one modality per frame.
    /// Returns `([F, D] cls, [F·N, D] patches)`.
    pub fn encode_frames(&self, tape: &mut Tape, p: &Bound, patches: Var, modalities: &[Modality]) -> Result<(Var, Var)> {
        let n = self.config.patches();
        let frames = modalities.len();
        if tape.shape(patches) != [frames * n, self.config.patch_len()] {
            return Err(Error::Shape {
                op: "encode_frames",
                lhs: tape.shape(patches).to_vec(),
                rhs: vec![frames * n, self.config.patch_len()],
            });
        }
        let embedded = self.patch_embed.forward(tape, p, patches)?;
        let cls_table = tape.add_row(p[self.modality_embed], p[self.cls_token])?;
        let modality_rows: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
        let cls_rows = tape.gather_rows(cls_table, &modality_rows)?;

        let stacked = tape.concat(&[cls_rows, embedded], 0)?;
        let tokens = 1 + n;
        let order: Vec<usize> = (0..frames)
            .flat_map(|f| std::iter::once(f).chain((0..n).map(move |j| frames + f * n + j)))
            .collect();
        let mut x = tape.gather_rows(stacked, &order)?;
        let pos_index: Vec<usize> = (0..frames).flat_map(|_| 0..tokens).collect();
        let pos = tape.gather_rows(p[self.positions], &pos_index)?;
        x = tape.add(x, pos)?;

        for layer in &self.layers {
            x = layer.forward_self(tape, p, x, frames, tokens)?.out;
        }
        x = self.norm_out.forward(tape, p, x)?;

        let cls_index: Vec<usize> = (0..frames).map(|f| f * tokens).collect();
        let patch_index: Vec<usize> = (0..frames)
            .flat_map(|f| (1..tokens).map(move |j| f * tokens + j))
            .collect();
        Ok((tape.gather_rows(x, &cls_index)?, tape.gather_rows(x, &patch_index)?))
    }

    /// Linear map of [CLS] tokens `[F, D]` to frame embeddings `[F, d]`.
    pub fn project_cls(&self, tape: &mut Tape, p: &Bound, cls: Var) -> Result<Var> {
        self.projection.forward(tape, p, cls)
    }

    /// Full clip encoding for a batch of equal-length clips.
    pub fn encode_clips(&self, tape: &mut Tape, p: &Bound, clips: &[&VideoClip], frames: usize) -> Result<Encoded> {
        let pixels = tape.constant(self.patch_matrix(clips, frames)?);
        let modalities: Vec<Modality> = clips
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.modality, frames))
            .collect();
        let (cls, patches) = self.encode_frames(tape, p, pixels, &modalities)?;
        let frame_embeddings = self.project_cls(tape, p, cls)?;
        let sequence = tap(tape, frame_embeddings, clips.len(), frames)?;
        Ok(Encoded {
            cls,
            patches,
            frame_embeddings,
            sequence,
        })
    }
}

/// Temporal average pooling of `[B·T, d]` frame rows into `[B, d]`.
pub fn tap(tape: &mut Tape, frames: Var, clips: usize, t: usize) -> Result<Var> {
    let width = tape.shape(frames)[1];
    let cube = tape.reshape(frames, &[clips, t, width])?;
    tape.mean(cube, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            height: 4,
            width: 4,
            patch: 2,
            dim: 8,
            embed_dim: 4,
            layers: 1,
            heads: 2,
            seed: 5,
        }
    }

    #[test]
    fn patchify_shapes_and_locality() {
        let cfg = EncoderConfig::default();
        let constant = vec![0.3; 32 * 16];
        let p = patchify(&constant, &cfg).unwrap();
        assert_eq!(p.shape(), &[8, 64]);
        assert!(p.data().iter().all(|&v| v == 0.3));

        let mut spike = vec![0.0; 32 * 16];
        spike[0] = 1.0;
        let p = patchify(&spike, &cfg).unwrap();
        assert_eq!(p.row(0)[0], 1.0);
        assert!(p.data()[64..].iter().all(|&v| v == 0.0));

        assert!(matches!(patchify(&[0.0; 10], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_raster_order() {
        let cfg = tiny();
        let frame: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patchify(&frame, &cfg).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig { height: 30, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { heads: 3, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(EncoderConfig::default().patches(), 8);
    }

    #[test]
    fn encode_frame_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, EncoderConfig::default()).unwrap();
        let frame: Vec<f64> = (0..512).map(|i| (i % 7) as f64 / 7.0).collect();
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let px = tape.constant(patchify(&frame, &enc.config).unwrap());
            let (cls, patches) = enc.encode_frames(&mut tape, &p, px, &[Modality::Visible]).unwrap();
            (tape.value(cls).clone(), tape.value(patches).clone())
        };
        let (cls, patches) = run();
        assert_eq!(cls.shape(), &[1, 64]);
        assert_eq!(patches.shape(), &[8, 64]);
        assert_eq!(run(), (cls, patches));
    }

    #[test]
    fn tap_mean_single_frame_and_permutation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let m = tap(&mut tape, x, 1, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        let y = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 2.0]]).unwrap());
        let my = tap(&mut tape, y, 1, 2).unwrap();
        assert_eq!(tape.value(my).data(), tape.value(m).data());
        let one = tape.leaf(Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap());
        let mo = tap(&mut tape, one, 1, 1).unwrap();
        assert_eq!(tape.value(mo).data(), &[5.0, -1.0]);
    }

    #[test]
    fn projection_zero_and_identity() {
        let cfg = EncoderConfig { embed_dim: 8, ..tiny() };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg).unwrap();
        let w = store.find("enc.proj.weight").unwrap();
        let mut eye = Tensor::zeros(&[8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        *store.get_mut(w) = eye;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let zero = tape.constant(Tensor::zeros(&[1, 8]));
        let out = enc.project_cls(&mut tape, &p, zero).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let x = Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let xv = tape.constant(x.clone());
        let out = enc.project_cls(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn projection_gradient() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, tiny()).unwrap();
        let x = Tensor::new(vec![2, 8], (0..16).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let report = grad_check(
            |tape, v| {
                let p = store.bind(tape);
                let y = enc.project_cls(tape, &p, v)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}
