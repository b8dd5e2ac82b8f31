use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use xreid::ablation::{ablate_csv, run_grid, Grid, SEEDS};
use xreid::cpc::DEFAULT_MOMENTUM;
use xreid::data::{Dataset, Split};
use xreid::encoder::EncoderConfig;
use xreid::eval::{eval_csv, evaluate_model};
use xreid::gradsuite::{run_suite, TOLERANCE};
use xreid::model::{Model, Toggles};
use xreid::sampler::BatchSpec;
use xreid::synth::{generate, read_dataset, write_dataset, SynthConfig};
use xreid::trainer::{train, write_log_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "xreid", version, about = "Cross-modality video re-identification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split (I2V and V2I).
    Eval(EvalArgs),
    /// Train and evaluate variant grids over shared seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    identities: usize,
    /// Clips per identity per modality.
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Strength of the infrared transform.
    #[arg(long, default_value_t = 0.5)]
    gap: f64,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    occlusion: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Component {
    Cpc,
    /// All of SII, LII and CII.
    Mii,
    Sii,
    Lii,
    Cii,
    Tri,
    Ce,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 30)]
    steps_per_epoch: usize,
    /// Identities per batch.
    #[arg(long, default_value_t = 4)]
    p: usize,
    /// Clips per identity per modality in a batch.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Frames per clip; defaults to the dataset's clip length.
    #[arg(long)]
    t: Option<usize>,
    /// Prototype momentum.
    #[arg(long, default_value_t = DEFAULT_MOMENTUM)]
    mu: f64,
    #[arg(long)]
    tau: Option<f64>,
    /// LII stride.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    sii_stride: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, num_args = 1..)]
    disable: Vec<Component>,
    /// Also update prototypes with the hardest same-modality sample.
    #[arg(long)]
    same_modality_update: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

impl TrainOpts {
    fn config(&self, dataset: &Dataset, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let mut toggles = Toggles::ALL;
        let (mut triplet, mut ce) = (true, true);
        for c in &self.disable {
            match c {
                Component::Cpc => toggles.cpc = false,
                Component::Mii => {
                    toggles.sii = false;
                    toggles.lii = false;
                    toggles.cii = false;
                }
                Component::Sii => toggles.sii = false,
                Component::Lii => toggles.lii = false,
                Component::Cii => toggles.cii = false,
                Component::Tri => triplet = false,
                Component::Ce => ce = false,
            }
        }
        let e = EncoderConfig::default();
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            lr: self.lr.unwrap_or(d.lr),
            seed,
            momentum: self.mu,
            temperature: self.tau.unwrap_or(d.temperature),
            sii_stride: self.sii_stride.unwrap_or(d.sii_stride),
            lii_stride: self.stride.unwrap_or(d.lii_stride),
            margin: self.margin.unwrap_or(d.margin),
            batch: BatchSpec {
                p: self.p,
                k: self.k,
                t: self.t.unwrap_or(dataset.frames),
            },
            toggles,
            triplet,
            ce,
            same_modality_update: self.same_modality_update,
            encoder: EncoderConfig {
                dim: self.dim.unwrap_or(e.dim),
                embed_dim: self.embed_dim.unwrap_or(e.embed_dim),
                layers: self.layers.unwrap_or(e.layers),
                heads: self.heads.unwrap_or(e.heads),
                patch: self.patch.unwrap_or(e.patch),
                ..e
            },
            eval_each_epoch: false,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory; receives `ckpt`, `log.csv` and `eval.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory; one `<grid>.csv` per grid.
    #[arg(long)]
    out: PathBuf,
    /// Grids to run: modules, interactions, sii_stride, lii_stride.
    #[arg(long, num_args = 1.., default_values_t = Grid::ALL.map(|g| g.name().to_string()))]
    grid: Vec<String>,
    #[arg(long, num_args = 1.., default_values_t = SEEDS)]
    seeds: Vec<u64>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen(args: GenArgs) -> Result<()> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        identities: args.identities,
        clips_per_modality: args.clips,
        frames: args.frames,
        height: args.height,
        width: args.width,
        identity_strength: args.strength.unwrap_or(d.identity_strength),
        modality_gap: args.gap,
        temporal_jitter: args.jitter.unwrap_or(d.temporal_jitter),
        pixel_noise: args.noise.unwrap_or(d.pixel_noise),
        occlusion_prob: args.occlusion.unwrap_or(d.occlusion_prob),
        seed: args.seed,
    };
    let dataset = generate(&config)?;
    write_dataset(&dataset, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} clips to {}", dataset.clips.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let dataset = load_data(&args.data)?;
    let config = args.opts.config(&dataset, args.seed);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let outcome = train(&dataset, &config)?;
    outcome.model.save(&args.out.join("ckpt"), outcome.memories.as_ref())?;
    write_log_csv(&outcome.log, &args.out.join("log.csv"))?;
    if dataset.clips_per_modality > dataset.train_clips() {
        let reports = evaluate_model(&outcome.model, &dataset, Split::Test)?;
        let csv = eval_csv(&reports);
        write(&args.out.join("eval.csv"), &csv)?;
        print!("{csv}");
    }
    if let Some(last) = outcome.log.last() {
        eprintln!("trained {} steps, final loss {:.6}", last.step + 1, last.losses.total);
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let dataset = load_data(&args.data)?;
    let (model, _) = Model::load(&args.ckpt, DEFAULT_MOMENTUM)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let csv = eval_csv(&evaluate_model(&model, &dataset, Split::Test)?);
    if let Some(out) = &args.out {
        write(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let dataset = load_data(&args.data)?;
    let grids = args
        .grid
        .iter()
        .map(|g| Grid::parse(g).with_context(|| format!("unknown grid {g:?}")))
        .collect::<Result<Vec<_>>>()?;
    let base = args.opts.config(&dataset, 0);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for grid in grids {
        let rows = run_grid(&dataset, &base, grid, &args.seeds)
            .with_context(|| format!("grid {}", grid.name()))?;
        let csv = ablate_csv(&rows);
        write(&args.out.join(format!("{}.csv", grid.name())), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

fn gradcheck_cmd() -> Result<bool> {
    let mut ok = true;
    println!("op,max_rel_error,checked,pass");
    for case in run_suite()? {
        let pass = case.report.passes(TOLERANCE);
        ok &= pass;
        println!("{},{:e},{},{}", case.name, case.report.max_rel_error, case.report.checked, pass);
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Ablate(a) => ablate_cmd(a)?,
        Command::Gradcheck => return gradcheck_cmd(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

