//! Command-line surface for the super-resolution engine: dataset synthesis,
//! training, self-supervised adaptation, inference, evaluation, the gradient
//! verification suite and a matching benchmark.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags, missing files,
//! malformed config), 2 on a runtime failure.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use refsr_core::fusion::FusionMode;
use refsr_core::gradcheck;
use refsr_core::losses::LossMode;
use refsr_core::matching::{match_features, tiled_match_with_stats};
use refsr_core::model::{
    forward, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, SearchMode,
};
use refsr_core::pipeline::{
    adapt_sra, bicubic_baseline, load_dataset, psnr, save_dataset, ssim, synth_dataset,
    synth_dataset_shifted, train, SynthPair, TrainConfig,
};
use refsr_core::warp::apply_patch_affine;
use refsr_core::{Image, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "refsr", version, about = "Reference-based 2x super-resolution engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dual-camera dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Adapt a trained checkpoint to unpaired wide/tele data.
    Adapt(AdaptArgs),
    /// Super-resolve one image given a reference and a checkpoint.
    Infer(InferArgs),
    /// Report PSNR/SSIM of a checkpoint over a dataset.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Benchmark full vs. tiled patch matching, CSV output.
    BenchMatch(BenchMatchArgs),
}

/// A command failure tagged with the exit code it deserves.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(err.into())
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(err.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests parse as "errors" but are not.
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::BenchMatch(args) => cmd_bench_match(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// Config plumbing

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LossModeArg {
    L1,
    Full,
}

impl From<LossModeArg> for LossMode {
    fn from(v: LossModeArg) -> Self {
        match v {
            LossModeArg::L1 => LossMode::L1,
            LossModeArg::Full => LossMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FusionModeArg {
    Adaptive,
    Soft,
    Sum,
}

impl From<FusionModeArg> for FusionMode {
    fn from(v: FusionModeArg) -> Self {
        match v {
            FusionModeArg::Adaptive => FusionMode::Adaptive,
            FusionModeArg::Soft => FusionMode::Soft,
            FusionModeArg::Sum => FusionMode::Sum,
        }
    }
}

impl From<FusionMode> for FusionModeArg {
    fn from(v: FusionMode) -> Self {
        match v {
            FusionMode::Adaptive => FusionModeArg::Adaptive,
            FusionMode::Soft => FusionModeArg::Soft,
            FusionMode::Sum => FusionModeArg::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SearchModeArg {
    Full,
    Tiled,
}

impl From<SearchModeArg> for SearchMode {
    fn from(v: SearchModeArg) -> Self {
        match v {
            SearchModeArg::Full => SearchMode::Full,
            SearchModeArg::Tiled => SearchMode::Tiled,
        }
    }
}

impl From<SearchMode> for SearchModeArg {
    fn from(v: SearchMode) -> Self {
        match v {
            SearchMode::Full => SearchModeArg::Full,
            SearchMode::Tiled => SearchModeArg::Tiled,
        }
    }
}

/// Run settings as they appear in a JSON config file: every training field
/// plus the common paths, all optional. Unknown keys are rejected. Values
/// given as command-line flags take precedence over file values, which take
/// precedence over the built-in defaults. The effective config echoed by
/// `train` and `adapt` is itself a complete, reusable config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w_fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    extent: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_mode: Option<LossModeArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion: Option<FusionModeArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<SearchModeArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tile: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    margin: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<PathBuf>,
}

impl CliConfig {
    fn from_file(path: &Path) -> CmdResult<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))
            .map_err(usage)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))
            .map_err(usage)
    }

    /// Overlay `upper` onto `self`: any value set in `upper` wins.
    fn overlaid(self, upper: CliConfig) -> CliConfig {
        CliConfig {
            seed: upper.seed.or(self.seed),
            steps: upper.steps.or(self.steps),
            batch_size: upper.batch_size.or(self.batch_size),
            lr: upper.lr.or(self.lr),
            beta1: upper.beta1.or(self.beta1),
            beta2: upper.beta2.or(self.beta2),
            w_fid: upper.w_fid.or(self.w_fid),
            lambda: upper.lambda.or(self.lambda),
            extent: upper.extent.or(self.extent),
            n_pairs: upper.n_pairs.or(self.n_pairs),
            loss_mode: upper.loss_mode.or(self.loss_mode),
            fusion: upper.fusion.or(self.fusion),
            search: upper.search.or(self.search),
            tile: upper.tile.or(self.tile),
            margin: upper.margin.or(self.margin),
            eval_every: upper.eval_every.or(self.eval_every),
            data: upper.data.or(self.data),
            eval_data: upper.eval_data.or(self.eval_data),
            checkpoint: upper.checkpoint.or(self.checkpoint),
            out: upper.out.or(self.out),
            log: upper.log.or(self.log),
        }
    }

    /// Fill a [`TrainConfig`] starting from `base` for everything left unset.
    fn train_config(&self, base: TrainConfig) -> TrainConfig {
        let mut cfg = base;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.w_fid {
            cfg.w_fid = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.extent {
            cfg.extent = v;
        }
        if let Some(v) = self.n_pairs {
            cfg.n_pairs = v;
        }
        if let Some(v) = self.loss_mode {
            cfg.loss_mode = v.into();
        }
        if let Some(v) = self.fusion {
            cfg.fusion = v.into();
        }
        if let Some(v) = self.search {
            cfg.search.mode = v.into();
        }
        if let Some(v) = self.tile {
            cfg.search.tile = v;
        }
        if let Some(v) = self.margin {
            cfg.search.margin = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        cfg
    }

    /// The fully resolved form: every run field set, so the echoed config
    /// reproduces the run without any flags.
    fn effective(cfg: &TrainConfig, paths: CliConfig) -> CliConfig {
        CliConfig {
            seed: Some(cfg.seed),
            steps: Some(cfg.steps),
            batch_size: Some(cfg.batch_size),
            lr: Some(cfg.lr),
            beta1: Some(cfg.beta1),
            beta2: Some(cfg.beta2),
            w_fid: Some(cfg.w_fid),
            lambda: Some(cfg.lambda),
            extent: Some(cfg.extent),
            n_pairs: Some(cfg.n_pairs),
            loss_mode: Some(match cfg.loss_mode {
                LossMode::L1 => LossModeArg::L1,
                LossMode::Full => LossModeArg::Full,
            }),
            fusion: Some(cfg.fusion.into()),
            search: Some(cfg.search.mode.into()),
            tile: Some(cfg.search.tile),
            margin: Some(cfg.search.margin),
            eval_every: Some(cfg.eval_every),
            ..paths
        }
    }
}

/// Flags shared by `train` and `adapt`, mirroring the config file keys.
#[derive(Debug, Clone, Args)]
struct RunFlags {
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for parameter init and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Pairs sampled per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    beta2: Option<f64>,
    /// Weight of the confidence-weighted fidelity term.
    #[arg(long)]
    w_fid: Option<f64>,
    /// Weight of the fidelity term inside the adaptation objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Target extent when synthesizing an eval set.
    #[arg(long)]
    extent: Option<usize>,
    /// Pair count when synthesizing an eval set.
    #[arg(long)]
    n_pairs: Option<usize>,
    /// Reconstruction loss: plain l1 or blurred l1 plus the contextual term.
    #[arg(long, value_enum)]
    loss_mode: Option<LossModeArg>,
    /// Feature fusion variant.
    #[arg(long, value_enum)]
    fusion: Option<FusionModeArg>,
    /// Patch search strategy.
    #[arg(long, value_enum)]
    search: Option<SearchModeArg>,
    /// Query-grid block edge for tiled search.
    #[arg(long)]
    tile: Option<usize>,
    /// Source positions searched around each block for tiled search.
    #[arg(long)]
    margin: Option<usize>,
    /// Evaluate every this many steps (0 = only at the end).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Dataset directory (pair_NNNN subdirectories).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset directory; a synthesized set is used if absent.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Checkpoint to start from (adapt only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metric log CSV path; defaults to the checkpoint path plus ".csv".
    #[arg(long)]
    log: Option<PathBuf>,
}

impl RunFlags {
    fn as_config(&self) -> CliConfig {
        CliConfig {
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            w_fid: self.w_fid,
            lambda: self.lambda,
            extent: self.extent,
            n_pairs: self.n_pairs,
            loss_mode: self.loss_mode,
            fusion: self.fusion,
            search: self.search,
            tile: self.tile,
            margin: self.margin,
            eval_every: self.eval_every,
            data: self.data.clone(),
            eval_data: self.eval_data.clone(),
            checkpoint: self.checkpoint.clone(),
            out: self.out.clone(),
            log: self.log.clone(),
        }
    }

    /// File values overlaid with flag values.
    fn resolve(&self) -> CmdResult<CliConfig> {
        let file = match &self.config {
            Some(path) => CliConfig::from_file(path)?,
            None => CliConfig::default(),
        };
        Ok(file.overlaid(self.as_config()))
    }
}

fn echo_config(config: &CliConfig) -> CmdResult {
    let json = serde_json::to_string(config).map_err(runtime)?;
    println!("config {json}");
    Ok(())
}

fn require_path(value: &Option<PathBuf>, flag: &str) -> CmdResult<PathBuf> {
    value.clone().ok_or_else(|| usage(anyhow!("missing required --{flag} (or config key)")))
}

fn default_log_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.csv", out.display()))
}

fn load_pairs(dir: &Path) -> CmdResult<Vec<SynthPair>> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())).map_err(usage)
}

fn read_image_tensor(path: &Path) -> CmdResult<Tensor> {
    let img =
        Image::load_png(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    Ok(img.to_tensor())
}

fn write_image_tensor(t: &Tensor, path: &Path) -> CmdResult {
    let clamped = t.map(|v| v.clamp(0.0, 1.0));
    let img = Image::from_tensor(&clamped).map_err(runtime)?;
    img.save_png(path).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn load_checkpoint_cmd(path: &Path) -> CmdResult<Checkpoint> {
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(usage)
}

/// Format an optional float as a CSV cell, empty when absent.
fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args)]
struct SynthArgs {
    /// Dataset seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of pairs.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Target-image edge length (multiple of 4, at least 32).
    #[arg(long, default_value_t = 64)]
    extent: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Apply the domain-shift transform (dimmer, smoother targets).
    #[arg(long)]
    shifted: bool,
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    println!(
        "config {}",
        serde_json::json!({
            "seed": args.seed,
            "n": args.n,
            "extent": args.extent,
            "out": args.out,
            "shifted": args.shifted,
        })
    );
    let pairs = if args.shifted {
        synth_dataset_shifted(args.seed, args.n, args.extent)
    } else {
        synth_dataset(args.seed, args.n, args.extent)
    }
    .map_err(usage)?;
    save_dataset(&args.out, &pairs)
        .with_context(|| format!("writing dataset {}", args.out.display()))
        .map_err(runtime)?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: RunFlags,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let resolved = args.flags.resolve()?;
    let data_dir = require_path(&resolved.data, "data")?;
    let out_path = require_path(&resolved.out, "out")?;
    let log_path = resolved.log.clone().unwrap_or_else(|| default_log_path(&out_path));

    let train_pairs = load_pairs(&data_dir)?;
    let mut cfg = resolved.train_config(TrainConfig::default());
    // Keep the echoed config honest about the data actually used.
    cfg.n_pairs = train_pairs.len();
    if let Some(first) = train_pairs.first() {
        cfg.extent = first.hr.h();
    }
    let eval_pairs = match &resolved.eval_data {
        Some(dir) => load_pairs(dir)?,
        None => synth_dataset(cfg.seed + 1000, 8, cfg.extent).map_err(runtime)?,
    };

    echo_config(&CliConfig::effective(
        &cfg,
        CliConfig {
            data: Some(data_dir),
            eval_data: resolved.eval_data.clone(),
            out: Some(out_path.clone()),
            log: Some(log_path.clone()),
            ..CliConfig::default()
        },
    ))?;

    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating log {}", log_path.display()))
        .map_err(runtime)?;
    writeln!(log, "step,loss_total,loss_rec,loss_fid,eval_psnr,eval_ssim").map_err(runtime)?;

    let started = Instant::now();
    let mut log_err = None;
    let outcome = train(&cfg, &train_pairs, &eval_pairs, |row| {
        let line = format!(
            "{},{},{},{},{},{}",
            row.step,
            row.loss_total,
            row.loss_rec,
            row.loss_fid,
            csv_cell(row.eval_psnr),
            csv_cell(row.eval_ssim),
        );
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        if let (Some(p), Some(s)) = (row.eval_psnr, row.eval_ssim) {
            println!("step {} loss {:.6} eval psnr {:.3} ssim {:.4}", row.step, row.loss_total, p, s);
        }
    })
    .map_err(runtime)?;
    if let Some(e) = log_err {
        return Err(runtime(anyhow!(e).context(format!("writing log {}", log_path.display()))));
    }

    save_checkpoint(&out_path, &outcome.params, &cfg.model_config(), cfg.seed)
        .with_context(|| format!("writing checkpoint {}", out_path.display()))
        .map_err(runtime)?;
    println!(
        "trained {} steps in {:.1}s: eval psnr {:.3} ssim {:.4} (bicubic {:.3}/{:.4})",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        outcome.final_eval.psnr,
        outcome.final_eval.ssim,
        outcome.baseline.psnr,
        outcome.baseline.ssim,
    );
    println!("checkpoint {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// adapt

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    flags: RunFlags,
}

/// The architectures this binary can adapt: default widths with any fusion
/// and search settings (the widths a `train` run produces).
fn check_default_widths(config: &ModelConfig) -> CmdResult {
    let expected = ModelConfig {
        fusion: config.fusion,
        search: config.search,
        ..ModelConfig::default()
    };
    if *config != expected {
        return Err(usage(anyhow!("checkpoint uses a non-default architecture; adapt supports checkpoints produced by this binary")));
    }
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> CmdResult {
    let resolved = args.flags.resolve()?;
    let ckpt_path = require_path(&resolved.checkpoint, "checkpoint")?;
    let data_dir = require_path(&resolved.data, "data")?;
    let out_path = require_path(&resolved.out, "out")?;
    let log_path = resolved.log.clone().unwrap_or_else(|| default_log_path(&out_path));

    let ckpt = load_checkpoint_cmd(&ckpt_path)?;
    check_default_widths(&ckpt.config)?;
    let pairs = load_pairs(&data_dir)?;

    // Unless overridden, adaptation keeps the fusion and search settings the
    // checkpoint was trained with.
    let mut base = TrainConfig { fusion: ckpt.config.fusion, search: ckpt.config.search, ..TrainConfig::default() };
    base.steps = 100;
    base.lr = 2e-4;
    let mut cfg = resolved.train_config(base);
    cfg.n_pairs = pairs.len();
    if let Some(first) = pairs.first() {
        cfg.extent = first.hr.h();
    }

    echo_config(&CliConfig::effective(
        &cfg,
        CliConfig {
            data: Some(data_dir),
            checkpoint: Some(ckpt_path),
            out: Some(out_path.clone()),
            log: Some(log_path.clone()),
            ..CliConfig::default()
        },
    ))?;

    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating log {}", log_path.display()))
        .map_err(runtime)?;
    writeln!(log, "step,sra_loss").map_err(runtime)?;

    let started = Instant::now();
    let mut log_err = None;
    let outcome = adapt_sra(ckpt.params, &cfg, &pairs, |step, loss| {
        if let Err(e) = writeln!(log, "{step},{loss}") {
            log_err.get_or_insert(e);
        }
    })
    .map_err(runtime)?;
    if let Some(e) = log_err {
        return Err(runtime(anyhow!(e).context(format!("writing log {}", log_path.display()))));
    }

    save_checkpoint(&out_path, &outcome.params, &cfg.model_config(), cfg.seed)
        .with_context(|| format!("writing checkpoint {}", out_path.display()))
        .map_err(runtime)?;
    println!(
        "adapted {} steps in {:.1}s: mean objective {:.6} -> {:.6}",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        outcome.loss_before,
        outcome.loss_after,
    );
    println!("checkpoint {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

#[derive(Args)]
struct InferArgs {
    /// Low-resolution input PNG (even extents, at least 16).
    #[arg(long)]
    lr: PathBuf,
    /// Reference PNG (extents divisible by 4, at least 16).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG at twice the input extents.
    #[arg(long)]
    out: PathBuf,
    /// Also write matching/alignment debug images into this directory.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    println!(
        "config {}",
        serde_json::json!({
            "lr": args.lr,
            "ref": args.reference,
            "checkpoint": args.checkpoint,
            "out": args.out,
            "dump_dir": args.dump_dir,
        })
    );
    let lr = read_image_tensor(&args.lr)?;
    let reference = read_image_tensor(&args.reference)?;
    let ckpt = load_checkpoint_cmd(&args.checkpoint)?;
    let trace = forward(&ckpt.params, &ckpt.config, &lr, &reference).map_err(runtime)?;
    write_image_tensor(&trace.sr, &args.out)?;
    println!("wrote {}", args.out.display());

    if let Some(dir) = &args.dump_dir {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        write_image_tensor(&trace.lr_up, &dir.join("lr_up.png"))?;
        write_image_tensor(&trace.ref_matched, &dir.join("ref_matched.png"))?;
        let refined = apply_patch_affine(&reference, &trace.match_result, &trace.field, 4)
            .map_err(runtime)?;
        write_image_tensor(&refined, &dir.join("ref_aligned.png"))?;
        // Map cosine confidences from [-1, 1] to a gray image.
        let conf = trace.conf_map.map(|v| (v + 1.0) / 2.0);
        write_image_tensor(&conf, &dir.join("confidence.png"))?;
        println!("debug dumps in {}", dir.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Also report plain bicubic upscaling on the same pairs.
    #[arg(long)]
    baseline: bool,
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    println!(
        "config {}",
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "data": args.data,
            "baseline": args.baseline,
        })
    );
    let ckpt = load_checkpoint_cmd(&args.checkpoint)?;
    let pairs = load_pairs(&args.data)?;
    if pairs.is_empty() {
        return Err(usage(anyhow!("dataset {} is empty", args.data.display())));
    }
    let (mut p_acc, mut s_acc) = (0.0, 0.0);
    for (i, pair) in pairs.iter().enumerate() {
        let trace = forward(&ckpt.params, &ckpt.config, &pair.lr, &pair.ref_img).map_err(runtime)?;
        let sr = trace.sr.map(|v| v.clamp(0.0, 1.0));
        let p = psnr(&sr, &pair.hr).map_err(runtime)?;
        let s = ssim(&sr, &pair.hr).map_err(runtime)?;
        p_acc += p;
        s_acc += s;
        println!("pair_{i:04} psnr {p:.6} ssim {s:.6}");
    }
    let n = pairs.len() as f64;
    println!("mean psnr {:.6} ssim {:.6}", p_acc / n, s_acc / n);
    if args.baseline {
        let base = bicubic_baseline(&pairs).map_err(runtime)?;
        println!("bicubic psnr {:.6} ssim {:.6}", base.psnr, base.ssim);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args)]
struct GradcheckArgs {
    /// Suite seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Run a single named check instead of the whole suite.
    #[arg(long)]
    only: Option<String>,
    /// List check names and exit.
    #[arg(long)]
    list: bool,
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    if args.list {
        for name in gradcheck::suite_names() {
            println!("{name}");
        }
        return Ok(());
    }
    println!(
        "config {}",
        serde_json::json!({ "seed": args.seed, "only": args.only })
    );
    let results = match &args.only {
        Some(name) => vec![gradcheck::run_one(name, args.seed).map_err(usage)?],
        None => gradcheck::run_all(args.seed).results,
    };
    let mut failed = 0usize;
    for r in &results {
        println!(
            "{:<22} instances {:>2}  max rel err {:.3e}  tol {:.0e}  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" },
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-match

#[derive(Args)]
struct BenchMatchArgs {
    /// Feature-grid edge lengths to benchmark, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,32")]
    sizes: Vec<usize>,
    /// Feature channels.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Query-grid block edge for the tiled variant.
    #[arg(long, default_value_t = 32)]
    tile: usize,
    /// Source margin for the tiled variant.
    #[arg(long, default_value_t = 8)]
    margin: usize,
    /// Timed repetitions per row (the fastest is reported).
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Feature seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_bench_match(args: BenchMatchArgs) -> CmdResult {
    use rand::SeedableRng;
    if args.sizes.is_empty() || args.reps == 0 {
        return Err(usage(anyhow!("need at least one size and one repetition")));
    }
    let mut rows = vec!["variant,H,W,channels,wall_time_ms,peak_similarity_bytes".to_string()];
    for &size in &args.sizes {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
        let q = Tensor::rand_uniform(1, args.channels, size, size, -1.0, 1.0, &mut rng);
        let r = Tensor::rand_uniform(1, args.channels, size, size, -1.0, 1.0, &mut rng);

        let mut best_ms = f64::INFINITY;
        for _ in 0..args.reps {
            let t0 = Instant::now();
            let m = match_features(&q, &r).map_err(runtime)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            best_ms = best_ms.min(ms);
            debug_assert_eq!(m.index_map.len(), size * size);
        }
        // Exhaustive search holds the dense query x source similarity matrix.
        let full_bytes = size * size * size * size * std::mem::size_of::<f64>();
        rows.push(format!("full,{size},{size},{},{best_ms:.3},{full_bytes}", args.channels));

        let mut best_ms = f64::INFINITY;
        let mut peak = 0usize;
        for _ in 0..args.reps {
            let t0 = Instant::now();
            let (_, stats) =
                tiled_match_with_stats(&q, &r, args.tile, args.margin).map_err(runtime)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            best_ms = best_ms.min(ms);
            peak = stats.peak_similarity_bytes;
        }
        rows.push(format!("tiled,{size},{size},{},{best_ms:.3},{peak}", args.channels));
    }
    let csv = rows.join("\n");
    println!("{csv}");
    if let Some(path) = &args.out {
        fs::write(path, format!("{csv}\n"))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
    }
    Ok(())
}
