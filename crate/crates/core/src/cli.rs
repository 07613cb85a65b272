//! `fractalflow` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetKind, ModelConfig, RunConfig};
use crate::data::{
    append_metrics_csv, load_checkpoint, load_idx, load_raw_grid, make_moons, postprocess, save_checkpoint,
    write_image_grid, write_metrics_csv, ImageDataset, MetricsRecord,
};
use crate::error::{Error, Result};
use crate::prior::{categorical, Prior, PriorKind, WeightMode};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, FlowModel, TrainData, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.ffl";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(
    name = "fractalflow",
    version,
    about = "Train, evaluate and sample normalizing-flow density models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InspectMode {
    /// One sample grid per outer topic.
    Topics,
    /// Per topic, rows sharing one grid-component assignment.
    Means,
    /// One grid per intermediate flow state.
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightModeArg {
    Expected,
    Resampled,
}

impl From<WeightModeArg> for WeightMode {
    fn from(w: WeightModeArg) -> Self {
        match w {
            WeightModeArg::Expected => WeightMode::Expected,
            WeightModeArg::Resampled => WeightMode::Resampled,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics, checkpoints and a parameter report.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint if it exists.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the validation bits per dimension of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a grid of model samples.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples (defaults to the configured grid size).
        #[arg(long)]
        n: Option<usize>,
        /// Scale on the prior's Gaussian standard deviations.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Mixture weights used for sampling (defaults to the configured mode).
        #[arg(long, value_enum)]
        weight_mode: Option<WeightModeArg>,
        /// Output file (.pgm/.ppm for images, .csv for points).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Topic-conditional grids or per-step visualizations.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: InspectMode,
        /// Output directory (defaults to `<output.dir>/inspect`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, value_enum)]
        weight_mode: Option<WeightModeArg>,
        /// Keep 1×1 channel mixing in steps mode.
        #[arg(long)]
        keep_mix: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

/// Sets the global worker count from `FRACTALFLOW_THREADS` when present.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FRACTALFLOW_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::config("FRACTALFLOW_THREADS", format!("expected a positive integer, got `{v}`"))
            })?;
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Training and validation sets described by the data section.
pub fn load_datasets(cfg: &RunConfig) -> Result<(TrainData, Option<TrainData>)> {
    let d = &cfg.data;
    if d.dataset == DatasetKind::Moons {
        let train = make_moons(d.moons_n, d.moons_noise, cfg.train.seed)?;
        let val = make_moons(
            d.val_count.unwrap_or(d.moons_n / 2).max(2),
            d.moons_noise,
            cfg.train.seed.wrapping_add(1),
        )?;
        return Ok((TrainData::Points(train), Some(TrainData::Points(val))));
    }
    let train_path = d.train_path.as_deref().expect("validated");
    let load = |path: &Path, labels: Option<&Path>| -> Result<ImageDataset> {
        let raw = match d.dataset {
            DatasetKind::RawGrid => {
                load_raw_grid(path, d.raw_shape.expect("validated"), d.raw_count.expect("validated"))?
            }
            _ => load_idx(path, labels, &format!("{:?}", d.dataset).to_lowercase())?,
        };
        raw.resized(d.resize)
    };
    let full = load(train_path, d.train_labels.as_deref())?;
    let (mut train, val) = match &d.val_path {
        Some(vp) => {
            let v = load(vp, d.val_labels.as_deref())?;
            let v = match d.val_count {
                Some(k) if k < v.len() => v.slice(0, k)?,
                _ => v,
            };
            (full, Some(v))
        }
        None => {
            let k = d.val_count.unwrap_or(full.len() / 10);
            if k == 0 {
                (full, None)
            } else if k >= full.len() {
                return Err(Error::config(
                    "data.val_count",
                    format!("{k} leaves no training images of {}", full.len()),
                ));
            } else {
                let cut = full.len() - k;
                (full.slice(0, cut)?, Some(full.slice(cut, full.len())?))
            }
        }
    };
    if let Some(k) = d.train_count {
        if k == 0 {
            return Err(Error::config("data.train_count", "must be positive"));
        }
        if k < train.len() {
            train = train.slice(0, k)?;
        }
    }
    Ok((TrainData::Images(train), val.map(TrainData::Images)))
}

#[derive(Serialize)]
struct Echo<'a> {
    shape: [usize; 3],
    model: &'a ModelConfig,
}

/// Architecture description stored in checkpoints.
pub fn config_echo(model: &ModelConfig, shape: [usize; 3]) -> String {
    toml::to_string(&Echo { shape, model }).expect("model config serializes")
}

pub fn build_model(cfg: &RunConfig, shape: [usize; 3]) -> Result<FlowModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    FlowModel::from_config(&cfg.model, shape, &mut rng)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE))
}

/// Model with parameters from a checkpoint.
pub fn load_trained(cfg: &RunConfig, shape: [usize; 3], ckpt: &Path) -> Result<(FlowModel<f32>, u64)> {
    let c = load_checkpoint::<f32>(ckpt)?;
    if c.config_echo != config_echo(&cfg.model, shape) {
        return Err(Error::config(
            "checkpoint",
            "architecture in checkpoint differs from the configuration",
        ));
    }
    let mut model = build_model(cfg, shape)?;
    model.load_params(&c.tensors)?;
    Ok((model, c.epoch))
}

pub fn param_report_text(model: &FlowModel<f32>) -> String {
    let mut s = String::new();
    for (k, v) in model.param_report() {
        s.push_str(&format!("{k}\t{v}\n"));
    }
    s.push_str(&format!("total\t{}\n", model.param_count()));
    s
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let (train, val) = load_datasets(cfg)?;
    let shape = train.shape();
    cfg.model.validate(shape)?;
    let echo = config_echo(&cfg.model, shape);
    let model = build_model(cfg, shape)?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("params.txt"), param_report_text(&model))?;
    log::info!("{} parameters", model.param_count());
    let mut trainer = match resume.filter(|p| p.exists()) {
        Some(p) => Trainer::restore(model, cfg.train.clone(), &load_checkpoint(p)?, &echo)?,
        None => Trainer::new(model, cfg.train.clone())?,
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    let every = cfg.output.checkpoint_every;
    let total = cfg.train.epochs;
    let result = trainer.fit(&train, val.as_ref(), |t| {
        write_metrics_csv(t.history(), &metrics)?;
        if t.epoch() % every == 0 || t.epoch() == total {
            save_checkpoint(&t.checkpoint(&echo), &ckpt)?;
        }
        Ok(())
    });
    match result {
        Ok(h) => {
            let h = h.to_vec();
            write_metrics_csv(&h, &metrics)?;
            if !ckpt.exists() {
                save_checkpoint(&trainer.checkpoint(&echo), &ckpt)?;
            }
            Ok(h)
        }
        Err(Error::NonFinite(what)) => Err(Error::Divergence {
            epoch: trainer.epoch() + 1,
            batch: 0,
            message: format!("non-finite values in {what}"),
        }),
        Err(e) => Err(e),
    }
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<f64> {
    let (train, val) = load_datasets(cfg)?;
    let shape = train.shape();
    let (model, epoch) = load_trained(cfg, shape, &checkpoint_path(cfg, ckpt))?;
    let data = val.as_ref().unwrap_or(&train);
    let bpd = evaluate(&model, data, cfg.train.seed, cfg.train.batch_size.max(256))?;
    append_metrics_csv(
        &[MetricsRecord {
            epoch: epoch as usize,
            train_bpd: f64::NAN,
            val_bpd: Some(bpd),
            l2_loss: f64::NAN,
            seconds: 0.0,
        }],
        &cfg.output.dir.join(METRICS_FILE),
    )?;
    Ok(bpd)
}

fn grid_dims(n: usize, max_cols: usize) -> (usize, usize) {
    let cols = n.min(max_cols.max(1));
    (n.div_ceil(cols), cols)
}

/// Writes images (model-space tensor) as a grid, or points as CSV.
fn write_samples(x: &Tensor<f32>, data: &TrainData, cols: usize, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match data {
        TrainData::Images(_) => {
            let n = x.shape()[0];
            let shape = [x.shape()[1], x.shape()[2], x.shape()[3]];
            let (rows, cols) = grid_dims(n, cols);
            let mut px = postprocess(x);
            px.resize(rows * cols * shape.iter().product::<usize>(), 0);
            write_image_grid(&px, shape, rows, cols, path)
        }
        TrainData::Points(_) => {
            let d: usize = x.shape()[1..].iter().product();
            let mut s = String::new();
            for row in x.data().chunks(d) {
                let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&fields.join(","));
                s.push('\n');
            }
            fs::write(path, s)?;
            Ok(())
        }
    }
}

fn sample_ext(data: &TrainData, shape: [usize; 3]) -> &'static str {
    match data {
        TrainData::Points(_) => "csv",
        TrainData::Images(_) if shape[0] == 3 => "ppm",
        TrainData::Images(_) => "pgm",
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    n: Option<usize>,
    temperature: f64,
    mode: Option<WeightMode>,
    out: Option<&Path>,
    seed: u64,
) -> Result<PathBuf> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("--temperature", "must be positive"));
    }
    let n = n.unwrap_or(cfg.output.grid_rows * cfg.output.grid_cols);
    if n == 0 {
        return Err(Error::config("--n", "must be at least 1"));
    }
    let (train, _) = load_datasets(cfg)?;
    let shape = train.shape();
    let (model, _) = load_trained(cfg, shape, &checkpoint_path(cfg, ckpt))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = model.sample(n, temperature, mode.unwrap_or(cfg.output.weight_mode), &mut rng)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        cfg.output
            .dir
            .join(format!("samples_t{temperature}.{}", sample_ext(&train, shape)))
    });
    write_samples(&x, &train, cfg.output.grid_cols, &path)?;
    Ok(path)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_inspect(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    mode: InspectMode,
    out: Option<&Path>,
    temperature: f64,
    weight_mode: Option<WeightMode>,
    keep_mix: bool,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("--temperature", "must be positive"));
    }
    if mode != InspectMode::Steps && cfg.model.prior.kind != PriorKind::GridGmmLda {
        return Err(Error::config(
            "--mode",
            "topics and means modes need the grid-gmm-lda prior",
        ));
    }
    let (train, val) = load_datasets(cfg)?;
    let shape = train.shape();
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join("inspect"));
    let (model, _) = load_trained(cfg, shape, &checkpoint_path(cfg, ckpt))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (cfg.output.grid_rows, cfg.output.grid_cols);
    let ext = sample_ext(&train, shape);
    let wmode = weight_mode.unwrap_or(cfg.output.weight_mode);
    let mut written = Vec::new();
    match mode {
        InspectMode::Topics | InspectMode::Means => {
            let Prior::GridGmmLda(prior) = model.prior() else {
                return Err(Error::config(
                    "--mode",
                    "topics and means modes need the grid-gmm-lda prior",
                ));
            };
            let (_, e_w) = prior.expected_weights();
            let (d, m) = (prior.dim(), prior.components());
            for q in 0..prior.topics() {
                let z = if mode == InspectMode::Topics {
                    prior.topic_conditional_sample(q, rows * cols, temperature, wmode, None, &mut rng)?
                } else {
                    let mut all = Vec::with_capacity(rows * cols * d);
                    for _ in 0..rows {
                        let assign: Vec<usize> = (0..d)
                            .map(|j| categorical(&e_w[(q * d + j) * m..][..m], &mut rng))
                            .collect();
                        let z = prior.topic_conditional_sample(q, cols, temperature, wmode, Some(&assign), &mut rng)?;
                        all.extend_from_slice(z.data());
                    }
                    Tensor::new(&[rows * cols, d], all)?
                };
                let x = model.decode(&z)?;
                let name = if mode == InspectMode::Topics { "topic" } else { "means" };
                let path = dir.join(format!("{name}_{q}.{ext}"));
                write_samples(&x, &train, cols, &path)?;
                written.push(path);
            }
        }
        InspectMode::Steps => {
            let src = val.as_ref().unwrap_or(&train);
            let k = cols.min(src.len());
            let idx: Vec<usize> = (0..k).collect();
            let (u, _) = src.batch::<f32>(&idx, &mut rng)?;
            for (i, s) in model.intermediates(&u, !keep_mix)?.iter().enumerate() {
                let path = dir.join(format!("step_{i}.{ext}"));
                write_samples(s, &train, cols, &path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let h = cmd_train(&cfg, checkpoint.as_deref())?;
            if let Some(last) = h.last() {
                println!(
                    "epoch={} train_bpd={:.6} val_bpd={}",
                    last.epoch,
                    last.train_bpd,
                    last.val_bpd.map_or("-".into(), |v| format!("{v:.6}"))
                );
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            println!("bpd={}", cmd_eval(&cfg, checkpoint.as_deref())?);
        }
        Command::Sample {
            config,
            checkpoint,
            n,
            temperature,
            weight_mode,
            out,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let p = cmd_sample(
                &cfg,
                checkpoint.as_deref(),
                n,
                temperature,
                weight_mode.map(Into::into),
                out.as_deref(),
                seed,
            )?;
            println!("{}", p.display());
        }
        Command::Inspect {
            config,
            checkpoint,
            mode,
            out,
            temperature,
            weight_mode,
            keep_mix,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            for p in cmd_inspect(
                &cfg,
                checkpoint.as_deref(),
                mode,
                out.as_deref(),
                temperature,
                weight_mode.map(Into::into),
                keep_mix,
                seed,
            )? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
