//! The full network: shared encoder, interaction blocks, identity classifier,
//! and the composite training objective.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cpc::{cpcl_loss, BatchFeatures, PrototypeMemory};
use crate::data::{Modality, VideoClip};
use crate::encoder::{tap, Encoded, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{id_loss, triplet_loss};
use crate::mii::{channel_exchange, cii_partners, cmcl_loss, fuse, ClipLayout, Mii};
use crate::nn::Linear;
use crate::params::{read_xrw, write_xrw, Bound, ParamStore};
use crate::tape::{Tape, Var, L2_EPS};
use crate::tensor::Tensor;

/// Initial weight scale of the identity classifier. Features are unit-norm
/// halves, so logits start with unit spread.
pub const CLASSIFIER_STD: f64 = 1.0;

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub cpc: bool,
    pub sii: bool,
    pub lii: bool,
    pub cii: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        cpc: true,
        sii: true,
        lii: true,
        cii: true,
    };
    pub const NONE: Toggles = Toggles {
        cpc: false,
        sii: false,
        lii: false,
        cii: false,
    };

    pub fn temporal(&self) -> bool {
        self.sii || self.lii
    }

    pub fn any_mii(&self) -> bool {
        self.sii || self.lii || self.cii
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub frames: usize,
    pub classes: usize,
    pub toggles: Toggles,
    pub sii_stride: usize,
    pub lii_stride: usize,
}

impl ModelConfig {
    /// Width of the retrieval feature: `d`, plus `D` when a temporal branch
    /// contributes the fused interaction output.
    pub fn feature_dim(&self) -> usize {
        self.encoder.embed_dim + if self.toggles.temporal() { self.encoder.dim } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.frames == 0 || self.classes == 0 {
            return Err(Error::Config("frames and classes must be positive".into()));
        }
        if self.toggles.lii && self.lii_stride >= self.frames {
            return Err(Error::Config(format!(
                "LII stride {} must be below the clip length {}",
                self.lii_stride, self.frames
            )));
        }
        if self.toggles.sii && (self.sii_stride == 0 || self.encoder.dim % 4 != 0) {
            return Err(Error::Config(
                "SII needs a positive stride and a token width divisible by 4".into(),
            ));
        }
        Ok(())
    }

    fn to_meta(&self) -> Tensor {
        let e = &self.encoder;
        let t = &self.toggles;
        let values = [
            e.height,
            e.width,
            e.patch,
            e.dim,
            e.embed_dim,
            e.layers,
            e.heads,
            self.frames,
            self.classes,
            usize::from(t.cpc),
            usize::from(t.sii),
            usize::from(t.lii),
            usize::from(t.cii),
            self.sii_stride,
            self.lii_stride,
        ];
        Tensor::from_vec(values.iter().map(|&v| v as f64).collect())
    }

    fn from_meta(meta: &Tensor) -> Result<Self> {
        let v: Vec<usize> = meta.data().iter().map(|&x| x as usize).collect();
        if v.len() != 15 {
            return Err(Error::Load(format!("model metadata has {} fields, expected 15", v.len())));
        }
        Ok(Self {
            encoder: EncoderConfig {
                height: v[0],
                width: v[1],
                patch: v[2],
                dim: v[3],
                embed_dim: v[4],
                layers: v[5],
                heads: v[6],
                seed: 0,
            },
            frames: v[7],
            classes: v[8],
            toggles: Toggles {
                cpc: v[9] != 0,
                sii: v[10] != 0,
                lii: v[11] != 0,
                cii: v[12] != 0,
            },
            sii_stride: v[13],
            lii_stride: v[14],
        })
    }
}

/// Tape nodes produced by one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    /// `[B, d]` unit-norm sequence features.
    pub sequence: Var,
    /// `[B·T, D]` short- and long-term interaction outputs.
    pub short: Option<Var>,
    pub long: Option<Var>,
    /// `[B, D]` fused interaction output.
    pub fused: Option<Var>,
    /// `[B, feature_dim]` training feature; its normalization is the
    /// retrieval embedding.
    pub feature: Var,
}

/// Per-component values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub cpcl: f64,
    pub tri: f64,
    pub ce: f64,
    pub cmcl: f64,
}

pub struct Objective {
    pub loss: Var,
    pub report: LossReport,
    pub forward: Forward,
    /// Sequence features for the memory update after the optimizer step.
    pub batch: BatchFeatures,
}

/// Hyperparameters of the objective that are not part of the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub triplet: bool,
    pub ce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            margin: crate::losses::DEFAULT_MARGIN,
            triplet: true,
            ce: true,
        }
    }
}

pub struct Memories {
    pub visible: PrototypeMemory,
    pub infrared: PrototypeMemory,
}

impl Memories {
    pub fn get(&self, m: Modality) -> &PrototypeMemory {
        match m {
            Modality::Visible => &self.visible,
            Modality::Infrared => &self.infrared,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub mii: Mii,
    pub classifier: Linear,
}

impl Model {
    /// Builds a freshly initialized model. Encoder, interaction blocks and
    /// classifier draw from independent streams derived from `seed`, so
    /// toggles never change the initialization of shared parts.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            EncoderConfig {
                seed,
                ..config.encoder.clone()
            },
        )?;
        let mii = Mii::new(&mut store, config.encoder.dim, config.encoder.heads, seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let classifier = Linear::with_std(&mut store, "cls", config.feature_dim(), config.classes, CLASSIFIER_STD, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            mii,
            classifier,
        })
    }

    pub fn layout(&self, clips: usize) -> ClipLayout {
        ClipLayout {
            clips,
            frames: self.config.frames,
            patches: self.config.encoder.patches(),
        }
    }

    /// Encoder, temporal interaction and fusion. CII is never run here.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, clips: &[&VideoClip]) -> Result<Forward> {
        let cfg = &self.config;
        let layout = self.layout(clips.len());
        let encoded = self.encoder.encode_clips(tape, p, clips, cfg.frames)?;
        let sequence = tape.l2_normalize(encoded.sequence, 1, L2_EPS)?;
        let short = if cfg.toggles.sii {
            let exchanged = channel_exchange(tape, encoded.patches, layout, cfg.sii_stride)?;
            Some(self.mii.sii_block(tape, p, encoded.cls, exchanged, layout)?.out)
        } else {
            None
        };
        let long = if cfg.toggles.lii {
            Some(
                self.mii
                    .lii_block(tape, p, encoded.cls, encoded.patches, layout, cfg.lii_stride)?
                    .out,
            )
        } else {
            None
        };
        let (fused, feature) = if cfg.toggles.temporal() {
            let fused = fuse(tape, short, long, clips.len(), cfg.frames)?;
            let unit = tape.l2_normalize(fused, 1, L2_EPS)?;
            let feature = tape.concat(&[sequence, unit], 1)?;
            (Some(fused), feature)
        } else {
            (None, sequence)
        };
        Ok(Forward {
            encoded,
            sequence,
            short,
            long,
            fused,
            feature,
        })
    }

    /// Unit-norm retrieval embeddings `[B, feature_dim]` as plain values.
    pub fn embed(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let fwd = self.forward(&mut tape, &p, clips)?;
        let emb = tape.l2_normalize(fwd.feature, 1, L2_EPS)?;
        Ok(tape.value(emb).clone())
    }

    /// Sequence features `[B, d]` (unit-norm) without the interaction blocks.
    pub fn sequence_features(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let enc = self.encoder.encode_clips(&mut tape, &p, clips, self.config.frames)?;
        let seq = tape.l2_normalize(enc.sequence, 1, L2_EPS)?;
        Ok(tape.value(seq).clone())
    }

    /// `L_total = L_CPCL + L_tri + L_ce + L_CMCL`, with disabled components
    /// contributing nothing.
    pub fn objective(
        &self,
        tape: &mut Tape,
        p: &Bound,
        clips: &[&VideoClip],
        memories: Option<&Memories>,
        loss: LossConfig,
    ) -> Result<Objective> {
        let identities: Vec<usize> = clips.iter().map(|c| c.identity).collect();
        let modalities: Vec<Modality> = clips.iter().map(|c| c.modality).collect();
        let forward = self.forward(tape, p, clips)?;
        let toggles = self.config.toggles;

        let mut terms: Vec<Var> = Vec::with_capacity(4);
        let mut report = LossReport::default();

        if toggles.cpc {
            let mem = memories.ok_or_else(|| Error::Contract("CPC enabled without memories".into()))?;
            let l = cpcl_loss(tape, forward.sequence, &identities, &mem.visible, &mem.infrared, loss.temperature)?;
            report.cpcl = tape.value(l).item();
            terms.push(l);
        }

        if loss.triplet {
            let tri = triplet_loss(tape, forward.feature, &identities, loss.margin)?;
            report.tri = tape.value(tri).item();
            terms.push(tri);
        }

        if loss.ce {
            let ce = id_loss(tape, p, &self.classifier, forward.feature, &identities)?;
            report.ce = tape.value(ce).item();
            terms.push(ce);
        }

        if toggles.cii {
            let layout = self.layout(clips.len());
            let partners = cii_partners(&identities, &modalities)?;
            let mut sources = Vec::new();
            if let Some(long) = forward.long {
                sources.push(tap(tape, long, clips.len(), self.config.frames)?);
            }
            if let Some(short) = forward.short {
                sources.push(tap(tape, short, clips.len(), self.config.frames)?);
            }
            if sources.is_empty() {
                sources.push(tap(tape, forward.encoded.cls, clips.len(), self.config.frames)?);
            }
            let mut pairs = Vec::with_capacity(sources.len());
            for own in sources {
                let after = self
                    .mii
                    .cii_block(tape, p, own, forward.encoded.patches, &partners, layout)?;
                pairs.push((own, after));
            }
            let l = cmcl_loss(tape, &pairs)?;
            report.cmcl = tape.value(l).item();
            terms.push(l);
        }

        let Some((&first, rest)) = terms.split_first() else {
            return Err(Error::Contract("every loss component is disabled".into()));
        };
        let mut total = first;
        for &t in rest {
            total = tape.add(total, t)?;
        }
        report.total = tape.value(total).item();

        let batch = BatchFeatures {
            embeddings: tape.value(forward.sequence).clone(),
            identities,
            modalities,
        };
        Ok(Objective {
            loss: total,
            report,
            forward,
            batch,
        })
    }

    pub fn save(&self, path: &Path, memories: Option<&Memories>) -> Result<()> {
        let meta = self.config.to_meta();
        let mut mem_tensors: Vec<(String, Tensor)> = Vec::new();
        if let Some(m) = memories {
            for memory in [&m.visible, &m.infrared] {
                for (id, e) in memory.entries().iter().enumerate() {
                    mem_tensors.push((
                        format!("mem.{}.{id}", memory.modality.tag()),
                        Tensor::from_vec(e.clone()),
                    ));
                }
            }
        }
        let entries = std::iter::once(("meta.model", &meta))
            .chain(self.store.iter())
            .chain(mem_tensors.iter().map(|(n, t)| (n.as_str(), t)));
        write_xrw(path, entries)
    }

    /// Loads a checkpoint written by [`Model::save`], returning the model and
    /// its prototype memories if any were stored.
    pub fn load(path: &Path, momentum: f64) -> Result<(Self, Option<Memories>)> {
        let entries = read_xrw(path)?;
        let meta = entries
            .iter()
            .find(|(n, _)| n == "meta.model")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Load("checkpoint has no meta.model entry".into()))?;
        let config = ModelConfig::from_meta(meta)?;
        let mut model = Model::new(config, 0)?;
        model.store.load_from(&entries)?;

        let collect = |m: Modality| -> Vec<Vec<f64>> {
            (0..)
                .map_while(|id| {
                    let name = format!("mem.{}.{id}", m.tag());
                    entries.iter().find(|(n, _)| *n == name).map(|(_, t)| t.data().to_vec())
                })
                .collect()
        };
        let (vis, ir) = (collect(Modality::Visible), collect(Modality::Infrared));
        let memories = if vis.is_empty() {
            None
        } else {
            let mk = |modality, entries: Vec<Vec<f64>>| -> Result<PrototypeMemory> {
                let mut mem = PrototypeMemory::from_embeddings(
                    modality,
                    entries.len(),
                    momentum,
                    entries.iter().enumerate().map(|(i, e)| (i, e.as_slice())),
                )?;
                mem.set_entries(entries);
                Ok(mem)
            };
            Some(Memories {
                visible: mk(Modality::Visible, vis)?,
                infrared: mk(Modality::Infrared, ir)?,
            })
        };
        Ok((model, memories))
    }
}
