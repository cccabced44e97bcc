//! Command-line front end.
//!
//! Precedence for training options: built-in defaults, then `--config`
//! file values, then flags given explicitly on the command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::data::{self, synth, ImageBuffer};
use crate::error::{Error, Result};
use crate::eval;
use crate::training::{self, Corpus, Stage, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "flowprior", version, about = "Unpaired image denoising with a normalizing-flow prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split an image list (or a generated synthetic corpus) into disjoint clean / noisy / validation manifests.
    Prepare(PrepareArgs),
    /// Stage 1: fit the flow prior to clean patches.
    TrainPrior(TrainPriorArgs),
    /// Stage 2: train the denoiser on noisy patches against a frozen prior.
    TrainDenoiser(TrainDenoiserArgs),
    /// Denoise one image.
    Denoise(DenoiseArgs),
    /// PSNR sweep over noise levels on clean test images.
    Evaluate(EvaluateArgs),
    /// Per-image NLL under a flow prior.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Existing manifest to split.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Generate this many synthetic grayscale images instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Clean, noisy and validation fractions.
    #[arg(long, value_parser = parse_fractions, value_name = "CLEAN,NOISY,VAL", default_value = "0.45,0.45,0.1")]
    pub fractions: (f64, f64, f64),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by both training stages.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image manifest for this stage.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value config file; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub patches_per_image: usize,
    #[arg(long, default_value = "1e-3")]
    pub lr: f64,
    #[arg(long, default_value = "0.9")]
    pub beta1: f64,
    #[arg(long, default_value = "0.999")]
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value = "0")]
    pub max_grad_norm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epochs between periodic checkpoints; 0 writes only the final one.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    /// Image channels (1 or 3).
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    #[arg(long, default_value_t = 2)]
    pub flow_levels: usize,
    /// Flow steps per level.
    #[arg(long, default_value_t = 4)]
    pub flow_steps: usize,
    /// Hidden width of the coupling networks.
    #[arg(long, default_value_t = 64)]
    pub flow_hidden: usize,
    /// Add uniform dequantization noise to clean patches.
    #[arg(long)]
    pub dequantize: bool,
}

#[derive(Debug, Args)]
pub struct TrainDenoiserArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Flow prior checkpoint from train-prior.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clean validation manifest, used for per-epoch PSNR.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Prior weight.
    #[arg(long, default_value = "1.5e-6")]
    pub lambda: f64,
    /// Train one run per prior weight and report validation PSNR for each.
    #[arg(long, value_delimiter = ',', conflicts_with = "resume")]
    pub lambda_sweep: Option<Vec<f64>>,
    /// Side of the local mean filter.
    #[arg(long, default_value_t = 3)]
    pub blur: usize,
    /// Training noise range, 0-255 scale.
    #[arg(long, default_value = "0")]
    pub sigma_min: f64,
    #[arg(long, default_value = "50")]
    pub sigma_max: f64,
    /// Noise level for validation PSNR.
    #[arg(long, default_value = "25")]
    pub validation_sigma: f64,
    /// Treat the manifest images as already noisy.
    #[arg(long)]
    pub noisy_input: bool,
    #[arg(long, default_value_t = 64)]
    pub features: usize,
    /// Residual blocks.
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Denoiser checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Denoiser checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of clean test images.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "15,25,35")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for report.csv, summary.txt and config.toml.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Flow prior checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "input")]
    pub manifest: Option<PathBuf>,
    #[arg(long = "in", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// CSV output; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match execute(cli.command, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}

/// The training configuration a `train-prior` or `train-denoiser`
/// invocation would use, without running it.
pub fn resolve_config<I, T>(argv: I) -> Result<TrainConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(argv).map_err(|e| Error::Config(one_line(&e.to_string())))?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::Config(one_line(&e.to_string())))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match cli.command {
        Command::TrainPrior(a) => prior_config(&a, sub),
        Command::TrainDenoiser(a) => denoiser_config(&a, sub),
        _ => Err(Error::Config("not a training subcommand".into())),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn execute(cmd: Command, m: &ArgMatches) -> Result<()> {
    match cmd {
        Command::Prepare(a) => prepare(&a),
        Command::TrainPrior(a) => {
            let cfg = prior_config(&a, m)?;
            let corpus = Corpus::from_manifest(&a.common.manifest)?;
            let out = training::train_prior(&cfg, &corpus, &a.common.out, a.common.resume.as_deref())?;
            println!("{}", out.final_checkpoint.display());
            Ok(())
        }
        Command::TrainDenoiser(a) => train_denoiser(&a, m),
        Command::Denoise(a) => {
            let (net, _) = training::load_denoiser(&a.checkpoint)?;
            let img = data::load_image(&a.input)?;
            data::save_image(&eval::denoise_image(&net, &img)?, &a.out)
        }
        Command::Evaluate(a) => evaluate(&a),
        Command::Score(a) => score(&a),
    }
}

fn prepare(a: &PrepareArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let paths = match (a.synthetic, &a.manifest) {
        (Some(n), _) => {
            if n == 0 || a.size < 9 {
                return Err(Error::Config("need at least one synthetic image of size >= 9".into()));
            }
            let dir = a.out.join("images");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut paths = Vec::with_capacity(n);
            for (i, img) in synth::smooth_corpus(n, a.size, a.size, a.seed).iter().enumerate() {
                let p = dir.join(format!("img_{i:05}.pgm"));
                data::save_image(img, &p)?;
                paths.push(p);
            }
            data::write_manifest(a.out.join("all.txt"), &paths)?;
            paths
        }
        (None, Some(m)) => data::read_manifest(m)?,
        (None, None) => unreachable!("clap requires one of --manifest / --synthetic"),
    };
    let split = data::split_dataset(&paths, a.fractions, a.seed)?;
    for (name, set) in [("clean.txt", &split.clean), ("noisy.txt", &split.noisy), ("validation.txt", &split.validation)]
    {
        data::write_manifest(a.out.join(name), set)?;
        println!("{name}: {} images", set.len());
    }
    Ok(())
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Defaults, then the config file, then explicit flags.
fn layered(stage: Stage, config: Option<&Path>, m: &ArgMatches, flags: &[(&str, toml::Value)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_stage(stage);
    let file = match config {
        Some(p) => TrainConfig::load_file(p)?,
        None => toml::Table::new(),
    };
    for (key, value) in &file {
        cfg.set(key, value)?;
    }
    for (id, value) in flags {
        let key = config_key(id);
        if explicit(m, id) || !file.contains_key(key) {
            cfg.set(key, value)?;
        }
    }
    cfg.stage = stage;
    Ok(cfg)
}

fn config_key(flag_id: &str) -> &str {
    match flag_id {
        "features" => "denoiser_features",
        "blocks" => "denoiser_blocks",
        "noisy_input" => "synthesize_noise",
        other => other,
    }
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

fn common_flags(c: &TrainArgs) -> Vec<(&'static str, toml::Value)> {
    vec![
        ("epochs", int(c.epochs)),
        ("batch_size", int(c.batch_size)),
        ("patch_size", int(c.patch_size)),
        ("patches_per_image", int(c.patches_per_image)),
        ("lr", toml::Value::Float(c.lr)),
        ("beta1", toml::Value::Float(c.beta1)),
        ("beta2", toml::Value::Float(c.beta2)),
        ("max_grad_norm", toml::Value::Float(c.max_grad_norm)),
        ("seed", toml::Value::Integer(c.seed as i64)),
        ("checkpoint_every", int(c.checkpoint_every)),
        ("channels", int(c.channels)),
    ]
}

fn prior_config(a: &TrainPriorArgs, m: &ArgMatches) -> Result<TrainConfig> {
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("flow_levels", int(a.flow_levels)),
        ("flow_steps", int(a.flow_steps)),
        ("flow_hidden", int(a.flow_hidden)),
        ("dequantize", toml::Value::Boolean(a.dequantize)),
    ]);
    layered(Stage::Prior, a.common.config.as_deref(), m, &flags)
}

fn denoiser_config(a: &TrainDenoiserArgs, m: &ArgMatches) -> Result<TrainConfig> {
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("lambda", toml::Value::Float(a.lambda)),
        ("blur", int(a.blur)),
        ("sigma_min", toml::Value::Float(a.sigma_min)),
        ("sigma_max", toml::Value::Float(a.sigma_max)),
        ("validation_sigma", toml::Value::Float(a.validation_sigma)),
        ("noisy_input", toml::Value::Boolean(!a.noisy_input)),
        ("features", int(a.features)),
        ("blocks", int(a.blocks)),
    ]);
    layered(Stage::Denoiser, a.common.config.as_deref(), m, &flags)
}

fn train_denoiser(a: &TrainDenoiserArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = denoiser_config(a, m)?;
    let (prior, prior_ck) = training::load_flow(&a.checkpoint)?;
    let corpus = Corpus::from_manifest(&a.common.manifest)?;
    let validation = a.validation.as_ref().map(Corpus::from_manifest).transpose()?;
    let Some(sweep) = &a.lambda_sweep else {
        let out = training::train_denoiser(
            &cfg,
            &corpus,
            &prior,
            &prior_ck.sources,
            validation.as_ref(),
            &a.common.out,
            a.common.resume.as_deref(),
        )?;
        println!("{}", out.final_checkpoint.display());
        return Ok(());
    };
    let Some(validation) = &validation else {
        return Err(Error::Config("--lambda-sweep needs --validation".into()));
    };
    let mut table = String::from("lambda,psnr_val\n");
    for &lambda in sweep {
        cfg.loss.lambda = lambda;
        let dir = a.common.out.join(format!("lambda_{lambda:e}"));
        let out = training::train_denoiser(&cfg, &corpus, &prior, &prior_ck.sources, Some(validation), &dir, None)?;
        let psnr = training::validation_psnr(&out.model, validation, cfg.validation_sigma, cfg.seed)?;
        println!("lambda {lambda:e}: validation PSNR {psnr:.3} dB");
        table.push_str(&format!("{lambda:e},{psnr}\n"));
    }
    let p = a.common.out.join("lambda_sweep.csv");
    std::fs::write(&p, table).map_err(|e| Error::io(&p, e))
}

fn load_named(manifest: &Path) -> Result<Vec<(PathBuf, ImageBuffer)>> {
    let corpus = Corpus::from_manifest(manifest)?;
    Ok(corpus.paths.into_iter().zip(corpus.images).collect())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let (net, _) = training::load_denoiser(&a.checkpoint)?;
    let images = load_named(&a.manifest)?;
    let report = eval::evaluate_suite(&net, &images, &a.sigmas, a.seed)?;
    report.write(&a.out)?;
    print!("{}", report.table());
    eprintln!("evaluated {} rows in {:.2}s", report.rows.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let (flow, _) = training::load_flow(&a.checkpoint)?;
    let images = match (&a.manifest, &a.input) {
        (Some(m), _) => load_named(m)?,
        (None, Some(p)) => vec![(p.clone(), data::load_image(p)?)],
        (None, None) => unreachable!("clap requires --manifest or --in"),
    };
    let mut csv = String::from("path,nll_per_dim,tiles\n");
    for (path, img) in &images {
        let (nll, tiles) = eval::score_image(&flow, img)?;
        csv.push_str(&format!("{},{nll},{tiles}\n", path.display()));
    }
    match &a.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn parse_fractions(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated fractions, got {}", v.len())),
    }
}

/// Applies `FLOWPRIOR_THREADS` to the global worker pool.
pub fn configure_threads() {
    if let Some(n) = std::env::var("FLOWPRIOR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
}
