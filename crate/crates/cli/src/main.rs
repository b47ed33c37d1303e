//! Command-line driver: synthetic data, training, prediction, evaluation and
//! the two numerical self-checks.
//!
//! Exit codes: 0 success, 1 contract or usage error, 2 I/O or format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iswsst::autodiff::{load_checkpoint, save_checkpoint};
use iswsst::config::Config;
use iswsst::gradcheck::{block_suite, GradCheckOptions};
use iswsst::metrics::{evaluate_maps, MetricsReport};
use iswsst::model::Model;
use iswsst::raster::{load_labels, load_raster, parse_bands, save_labels, save_prediction, save_raster, BandTag};
use iswsst::synth::{synth_dataset_with, Sample, SynthOptions};
use iswsst::train::train_with_progress;
use iswsst::wavelet::{decode_pyramid, encode_pyramid, PadMode};
use iswsst::{Error, Tensor};

const RASTER_EXT: &str = "msrs";
const LABEL_EXT: &str = "lbls";

#[derive(Parser)]
#[command(name = "iswsst", version, about = "Multi-domain segmentation of multispectral rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedurally generated labelled dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint plus a config sidecar.
    Train(TrainArgs),
    /// Segment one raster with a trained model.
    Predict(PredictArgs),
    /// Score a trained model on a labelled dataset; prints CSV.
    Eval(EvalArgs),
    /// Encode and decode random images through the wavelet pyramid.
    RoundtripCheck(RoundtripArgs),
    /// Finite-difference check of every learnable block.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Failure> {
        Ok(match &self.config {
            Some(path) => Config::load(path, &self.overrides)?,
            None => Config::default().with_overrides(&self.overrides)?,
        })
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Side length in pixels; even and at least 16.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Standard deviation of the additive band noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    /// Many small regions instead of a few large shapes.
    #[arg(long)]
    boundary_dense: bool,
    /// Output directory; receives `NNNN.msrs` / `NNNN.lbls` pairs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory from `synth`; generated from the `data.*` keys if omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Band order of the stored rasters, e.g. `nir,red,green,blue`.
    #[arg(long)]
    bands: Option<String>,
    /// Checkpoint path; the config is written next to it with `.toml` appended.
    #[arg(long)]
    out: PathBuf,
    /// Print the loss every this many steps (0 silences it).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Model config; defaults to the sidecar next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sliding-window size; must equal the model's tile.
    #[arg(long)]
    window: Option<usize>,
    /// Sliding-window stride; defaults to half the window.
    #[arg(long)]
    stride: Option<usize>,
    /// Band order of the stored rasters, e.g. `nir,red,green,blue`.
    #[arg(long)]
    bands: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Raster container to segment.
    #[arg(long)]
    input: PathBuf,
    /// Label container to write; a palette PNG is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory of raster/label pairs.
    #[arg(long)]
    data: PathBuf,
    /// Name written in the `split` column.
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Args)]
struct RoundtripArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Number of random images.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// `none` or `reflect`; reflect accepts odd sizes.
    #[arg(long, default_value = "none")]
    pad: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn contract(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::RoundtripCheck(a) => roundtrip(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn bands(list: &Option<String>) -> Result<Option<Vec<BandTag>>, Failure> {
    Ok(list.as_deref().map(parse_bands).transpose()?)
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let opts = SynthOptions {
        noise: a.noise,
        boundary_dense: a.boundary_dense,
    };
    let data = synth_dataset_with(a.seed, a.n, a.size, opts)?;
    fs::create_dir_all(&a.out)?;
    for (i, (raster, labels)) in data.iter().enumerate() {
        save_raster(raster, a.out.join(format!("{i:04}.{RASTER_EXT}")))?;
        save_labels(labels, a.out.join(format!("{i:04}.{LABEL_EXT}")))?;
    }
    println!("wrote {} samples of {}x{} to {}", data.len(), a.size, a.size, a.out.display());
    Ok(())
}

/// Every `*.msrs` in `dir` with its same-stem `*.lbls`, in name order.
fn load_dataset(dir: &Path, tags: Option<&[BandTag]>) -> Result<Vec<Sample>, Failure> {
    let mut rasters: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    rasters.retain(|p| p.extension().is_some_and(|e| e == RASTER_EXT));
    rasters.sort();
    if rasters.is_empty() {
        return Err(Failure::contract(format!("no .{RASTER_EXT} files in {}", dir.display())));
    }
    rasters
        .iter()
        .map(|p| Ok((load_raster(p, tags)?, load_labels(p.with_extension(LABEL_EXT))?)))
        .collect()
}

fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = a.config.load()?;
    let tags = bands(&a.bands)?;
    let data = match &a.data {
        Some(dir) => load_dataset(dir, tags.as_deref())?,
        None => {
            let opts = SynthOptions {
                noise: cfg.data.noise,
                boundary_dense: cfg.data.boundary_dense,
            };
            synth_dataset_with(cfg.data.seed, cfg.data.n_samples, cfg.data.size, opts)?
        }
    };
    let mut model = Model::<f32>::build(&cfg.model_config()?, cfg.model.seed)?;
    let every = a.log_every;
    let report = train_with_progress(&mut model, &data, &cfg.train, |step, loss| {
        if every > 0 && (step % every == 0 || step + 1 == cfg.train.steps) {
            eprintln!("step {step:>6} loss {loss:.5}");
        }
    })?;
    save_checkpoint(&model.store, &a.out)?;
    cfg.save(sidecar(&a.out))?;
    let weights: Vec<String> = model
        .domain_kinds()
        .iter()
        .zip(&report.lambda)
        .map(|(k, w)| format!("{k}={w:.4}"))
        .collect();
    let last = report.losses.last().map_or("n/a".to_string(), |l| format!("{l:.5}"));
    println!(
        "trained {} steps on {} samples, final loss {last}, domain weights {}",
        report.losses.len(),
        data.len(),
        weights.join(" ")
    );
    Ok(())
}

fn load_model(a: &ModelArgs) -> Result<(Model<f32>, usize), Failure> {
    let config_path = a.config.clone().unwrap_or_else(|| sidecar(&a.model));
    let cfg = Config::load(&config_path, &[])?;
    let mut model = Model::<f32>::build(&cfg.model_config()?, cfg.model.seed)?;
    model.store.copy_values_from(&load_checkpoint(&a.model)?)?;
    let tile = model.config.tile;
    if let Some(w) = a.window {
        if w != tile {
            return Err(Failure::contract(format!("--window {w} differs from the model tile {tile}")));
        }
    }
    let stride = a.stride.unwrap_or((tile / 2).max(1));
    Ok((model, stride))
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let (model, stride) = load_model(&a.model)?;
    let raster = load_raster(&a.input, bands(&a.model.bands)?.as_deref())?;
    let labels = model.predict_raster(&raster, stride)?;
    save_prediction(&labels, &a.out)?;
    let hist: Vec<String> = labels.histogram().iter().map(usize::to_string).collect();
    println!("wrote {} ({}x{}), class pixels {}", a.out.display(), labels.height(), labels.width(), hist.join(","));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (model, stride) = load_model(&a.model)?;
    let data = load_dataset(&a.data, bands(&a.model.bands)?.as_deref())?;
    let preds = data
        .iter()
        .map(|(r, _)| model.predict_raster(r, stride))
        .collect::<Result<Vec<_>, _>>()?;
    let k = model.config.n_classes;
    let report = evaluate_maps(preds.iter().zip(data.iter().map(|(_, l)| l)), k)?;
    println!("{}", MetricsReport::csv_header(k));
    println!("{}", report.csv_row(&a.split));
    Ok(())
}

fn roundtrip(a: RoundtripArgs) -> Result<(), Failure> {
    let pad = match a.pad.as_str() {
        "none" => PadMode::None,
        "reflect" => PadMode::Reflect,
        other => return Err(Failure::contract(format!("--pad must be none or reflect, got {other:?}"))),
    };
    if a.count == 0 || a.channels == 0 {
        return Err(Failure::contract("--count and --channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    for _ in 0..a.count {
        let x: Tensor<f64> = Tensor::from_fn([a.channels, a.size, a.size], |_| rng.random_range(-1.0..1.0));
        let pyramid = encode_pyramid(&x, a.levels, pad)?;
        let back = decode_pyramid(&pyramid, &pyramid.coarsest().ll)?;
        worst = worst.max(back.max_abs_diff(&x)?);
    }
    println!("max_error {worst:.3e}");
    if worst > 1e-10 {
        return Err(Failure::contract(format!("reconstruction error {worst:.3e} exceeds 1e-10")));
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let opts = GradCheckOptions {
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let reports = block_suite(opts)?;
    println!("block,max_rel_error,checked,status");
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(a.tolerance);
        failed += usize::from(!ok);
        println!(
            "{},{:.3e},{},{}",
            r.block,
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::contract(format!("{failed} block(s) above {:e}", a.tolerance)));
    }
    Ok(())
}
