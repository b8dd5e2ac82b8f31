//! Training loop: memory initialization, then sample → encode → interact →
//! losses → Adam step → prototype update, with per-step loss logging.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cpc::{PrototypeMemory, DEFAULT_MOMENTUM};
use crate::data::{Dataset, Modality, Split, VideoClip};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::losses::DEFAULT_MARGIN;
use crate::metrics::MetricsReport;
use crate::mii::{DEFAULT_LII_STRIDE, DEFAULT_SII_STRIDE};
use crate::model::{LossConfig, LossReport, Memories, Model, ModelConfig, Toggles};
use crate::optim::{Adam, Schedule};
use crate::sampler::{sample_batch, BatchSpec};
use crate::tape::Tape;

const MEMORY_INIT_CHUNK: usize = 32;
const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub momentum: f64,
    pub temperature: f64,
    pub sii_stride: usize,
    pub lii_stride: usize,
    pub margin: f64,
    pub batch: BatchSpec,
    pub toggles: Toggles,
    pub triplet: bool,
    pub ce: bool,
    /// Also pull each prototype toward its hardest same-modality sample.
    pub same_modality_update: bool,
    pub encoder: EncoderConfig,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 30,
            lr: 1e-3,
            seed: 0,
            momentum: DEFAULT_MOMENTUM,
            temperature: 1.0,
            sii_stride: DEFAULT_SII_STRIDE,
            lii_stride: DEFAULT_LII_STRIDE,
            margin: DEFAULT_MARGIN,
            batch: BatchSpec::default(),
            toggles: Toggles::ALL,
            triplet: true,
            ce: true,
            same_modality_update: false,
            encoder: EncoderConfig::default(),
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                height: dataset.height,
                width: dataset.width,
                seed: self.seed,
                ..self.encoder.clone()
            },
            frames: self.batch.t,
            classes: dataset.identities,
            toggles: self.toggles,
            sii_stride: self.sii_stride,
            lii_stride: self.lii_stride,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            margin: self.margin,
            triplet: self.triplet,
            ce: self.ce,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossReport,
}

pub struct TrainOutcome {
    pub model: Model,
    pub memories: Option<Memories>,
    pub log: Vec<StepLog>,
    /// Test-split metrics after each epoch, when enabled.
    pub epoch_metrics: Vec<(usize, Vec<MetricsReport>)>,
}

/// Builds both prototype memories from the current encoder over the training
/// split.
pub fn init_memories(model: &Model, dataset: &Dataset, momentum: f64) -> Result<Memories> {
    let clips = dataset.split(Split::Train);
    let mut features = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(MEMORY_INIT_CHUNK) {
        let emb = model.sequence_features(chunk)?;
        for (i, clip) in chunk.iter().enumerate() {
            features.push((*clip, emb.row(i).to_vec()));
        }
    }
    let build = |m: Modality| {
        PrototypeMemory::from_embeddings(
            m,
            dataset.identities,
            momentum,
            features
                .iter()
                .filter(|(c, _)| c.modality == m)
                .map(|(c, e): &(&VideoClip, Vec<f64>)| (c.identity, e.as_slice())),
        )
    };
    Ok(Memories {
        visible: build(Modality::Visible)?,
        infrared: build(Modality::Infrared)?,
    })
}

fn check_unit_norm(memories: &Memories, step: usize) -> Result<()> {
    for m in [&memories.visible, &memories.infrared] {
        for (id, e) in m.entries().iter().enumerate() {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "{} prototype {id} has norm {norm} after step {step}",
                    m.modality
                )));
            }
        }
    }
    Ok(())
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.total_steps() == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    let model = Model::new(config.model_config(dataset), config.seed)?;
    train_model(model, dataset, config)
}

/// Trains an already-built model, e.g. one with hand-set parameters.
pub fn train_model(mut model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut memories = if config.toggles.cpc {
        Some(init_memories(&model, dataset, config.momentum)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let schedule = Schedule::new(config.lr, config.total_steps());
    let mut adam = Adam::new(model.store.values_mut());
    let loss_config = config.loss_config();
    let mut log = Vec::with_capacity(config.total_steps());
    let mut epoch_metrics = Vec::new();

    for step in 0..config.total_steps() {
        let epoch = step / config.steps_per_epoch;
        let clips = sample_batch(dataset, Split::Train, config.batch, &mut rng)?;
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let objective = model.objective(&mut tape, &bound, &clips, memories.as_ref(), loss_config)?;
        if !objective.report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                value: objective.report.total,
            });
        }
        tape.backward(objective.loss)?;
        let grads = model.store.gradients(&tape, &bound);
        drop(tape);
        adam.step(model.store.values_mut(), &grads, schedule.lr(step));

        if let Some(mem) = memories.as_mut() {
            mem.visible
                .update_from_batch(&objective.batch, config.same_modality_update)?;
            mem.infrared
                .update_from_batch(&objective.batch, config.same_modality_update)?;
            check_unit_norm(mem, step)?;
        }
        log.push(StepLog {
            step,
            epoch,
            losses: objective.report,
        });

        let epoch_done = (step + 1) % config.steps_per_epoch == 0;
        if epoch_done && config.eval_each_epoch && dataset.clips_per_modality > dataset.train_clips() {
            epoch_metrics.push((epoch, evaluate_model(&model, dataset, Split::Test)?.to_vec()));
        }
    }

    Ok(TrainOutcome {
        model,
        memories,
        log,
        epoch_metrics,
    })
}

pub const LOG_HEADER: &str = "step,epoch,l_total,l_cpcl,l_tri,l_ce,l_cmcl";

pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        let l = &row.losses;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.step, row.epoch, l.total, l.cpcl, l.tri, l.ce, l.cmcl
        )
        .unwrap();
    }
    out
}

pub fn write_log_csv(log: &[StepLog], path: &Path) -> Result<()> {
    std::fs::write(path, log_csv(log))?;
    Ok(())
}
