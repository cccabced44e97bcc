//! Stage one fits the flow prior; stage two trains the denoiser against it.

pub mod checkpoint;
mod config;
pub mod metrics;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind, OptimizerState, RngState};
pub use config::{Stage, TrainConfig};
use metrics::{MetricsLog, MetricsRow};

use crate::data::{check_disjoint, extract_patches_from_arrays, normalize, ImageBuffer, NoiseSpec};
use crate::denoiser::{denoise_loss, DenoiserNet};
use crate::error::{Error, Result};
use crate::eval::{denoise_image, noisy_image, psnr, sigma_seed};
use crate::flow::FlowModel;
use crate::nn::{ParamMode, Parameterized};
use crate::optim::Adam;
use crate::tensor::{DiffArray, Tape};

/// A set of images together with the files they came from.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub paths: Vec<PathBuf>,
    pub images: Vec<ImageBuffer>,
}

impl Corpus {
    pub fn load(paths: Vec<PathBuf>) -> Result<Self> {
        let images = paths.iter().map(crate::data::load_image).collect::<Result<_>>()?;
        Ok(Self { paths, images })
    }

    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(crate::data::read_manifest(path)?)
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// One-based epoch number.
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub fidelity: Option<f64>,
    pub prior: Option<f64>,
    pub psnr_val: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput<M> {
    pub model: M,
    /// Epochs run in this invocation.
    pub epochs: Vec<EpochSummary>,
    /// Periodic checkpoints written in this invocation, in order.
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

const NOISY_STREAM: u64 = 1 << 32;

/// The fixed noisy version of training image `index`, in float space and unclamped.
pub fn training_noise(image: &ImageBuffer, spec: NoiseSpec, seed: u64, index: usize) -> Result<DiffArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISY_STREAM + index as u64);
    let sigma = spec.sample_sigma(&mut rng);
    crate::data::add_noise_with_sigma(&normalize(image), sigma, &mut rng)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Prior => "prior",
        Stage::Denoiser => "denoiser",
    }
}

/// Checkpoint, metrics and epoch-summary file names for one stage.
pub struct RunFiles {
    pub dir: PathBuf,
    stage: &'static str,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>, stage: Stage) -> Self {
        Self { dir: dir.into(), stage: stage_name(stage) }
    }

    pub fn periodic(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("{}_e{epoch:04}.ck", self.stage))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(format!("{}_final.ck", self.stage))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(format!("{}_metrics.csv", self.stage))
    }

    pub fn epochs(&self) -> PathBuf {
        self.dir.join(format!("{}_epochs.csv", self.stage))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join(format!("{}_config.toml", self.stage))
    }
}

/// Rebuilds a flow from a checkpoint written by [`train_prior`].
pub fn flow_from_checkpoint(ck: &Checkpoint) -> Result<FlowModel> {
    expect_kind(ck, ModelKind::Flow)?;
    let cfg = TrainConfig::from_snapshot(&ck.config)?;
    // Parameters are overwritten, so the initialisation draw does not matter.
    let mut model = FlowModel::new(cfg.flow_arch(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_parameters(&ck.params)?;
    model.mark_initialized();
    Ok(model)
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<DenoiserNet> {
    expect_kind(ck, ModelKind::Denoiser)?;
    let cfg = TrainConfig::from_snapshot(&ck.config)?;
    let mut net = DenoiserNet::new(cfg.denoiser_arch(), &mut ChaCha8Rng::seed_from_u64(0));
    net.load_parameters(&ck.params)?;
    Ok(net)
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<(FlowModel, Checkpoint)> {
    let ck = Checkpoint::load_kind(path, ModelKind::Flow)?;
    Ok((flow_from_checkpoint(&ck)?, ck))
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<(DenoiserNet, Checkpoint)> {
    let ck = Checkpoint::load_kind(path, ModelKind::Denoiser)?;
    Ok((denoiser_from_checkpoint(&ck)?, ck))
}

fn expect_kind(ck: &Checkpoint, expected: ModelKind) -> Result<()> {
    if ck.kind != expected {
        return Err(CheckpointError::WrongKind { expected, found: ck.kind }.into());
    }
    Ok(())
}

pub fn snapshot_params(model: &impl Parameterized) -> Vec<(String, DiffArray)> {
    model
        .parameters()
        .into_iter()
        .map(|(n, p)| (n, DiffArray::new(p.shape().to_vec(), p.data().to_vec()).expect("valid parameter")))
        .collect()
}

/// Shared state of a resumable run.
struct Session<'a> {
    cfg: &'a TrainConfig,
    kind: ModelKind,
    files: RunFiles,
    sources: Vec<PathBuf>,
    rng: ChaCha8Rng,
    adam: Adam,
    step: u64,
    start_epoch: u64,
    metrics: MetricsLog,
    epoch_log: MetricsLog,
    last_checkpoint: Option<PathBuf>,
    written: Vec<PathBuf>,
}

impl<'a> Session<'a> {
    /// Starts fresh, or resumes from `resume` after checking that it was
    /// written by a run with the same configuration (epochs may differ).
    fn open<M: Parameterized>(
        cfg: &'a TrainConfig,
        kind: ModelKind,
        out_dir: &Path,
        sources: Vec<PathBuf>,
        model: &mut M,
        rng: ChaCha8Rng,
        resume: Option<&Path>,
    ) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let files = RunFiles::new(out_dir, cfg.stage);
        let write_config = |files: &RunFiles| {
            let p = files.config();
            std::fs::write(&p, cfg.snapshot()).map_err(|e| Error::io(&p, e))
        };
        let Some(path) = resume else {
            write_config(&files)?;
            return Ok(Self {
                cfg,
                kind,
                sources,
                rng,
                adam: Adam::new(cfg.adam)?,
                step: 0,
                start_epoch: 0,
                metrics: MetricsLog::create(files.metrics())?,
                epoch_log: MetricsLog::create(files.epochs())?,
                files,
                last_checkpoint: None,
                written: Vec::new(),
            });
        };
        let ck = Checkpoint::load_kind(path, kind)?;
        let mut saved = TrainConfig::from_snapshot(&ck.config)?;
        saved.epochs = cfg.epochs;
        if saved != *cfg {
            return Err(Error::Config(format!("{} was written with a different configuration", path.display())));
        }
        if ck.sources != sources {
            return Err(Error::Config(format!("{} was trained on a different image set", path.display())));
        }
        model.load_parameters(&ck.params)?;
        write_config(&files)?;
        let step = ck.step;
        Ok(Self {
            cfg,
            kind,
            sources,
            rng: ck.rng.restore(),
            adam: ck.optimizer.restore()?,
            step,
            start_epoch: ck.epoch,
            metrics: MetricsLog::resume(files.metrics(), |r| r.step <= step)?,
            epoch_log: MetricsLog::resume(files.epochs(), |r| r.step <= step)?,
            files,
            last_checkpoint: Some(path.to_path_buf()),
            written: Vec::new(),
        })
    }

    fn checkpoint(&self, model: &impl Parameterized, epoch: u64) -> Checkpoint {
        Checkpoint {
            kind: self.kind,
            params: snapshot_params(model),
            optimizer: OptimizerState::capture(&self.adam),
            rng: RngState::capture(&self.rng),
            step: self.step,
            epoch,
            config: self.cfg.snapshot(),
            sources: self.sources.clone(),
        }
    }

    fn end_epoch(&mut self, model: &impl Parameterized, summary: &EpochSummary) -> Result<()> {
        self.epoch_log.append(&MetricsRow {
            step: summary.step,
            epoch: summary.epoch,
            loss: summary.loss,
            fidelity: summary.fidelity,
            prior: summary.prior,
            psnr_val: summary.psnr_val,
        })?;
        let every = self.cfg.checkpoint_every as u64;
        if every > 0 && summary.epoch.is_multiple_of(every) {
            let p = self.files.periodic(summary.epoch);
            self.checkpoint(model, summary.epoch).save(&p)?;
            self.last_checkpoint = Some(p.clone());
            self.written.push(p);
        }
        Ok(())
    }

    fn finish<M: Parameterized>(self, model: M, epochs: Vec<EpochSummary>) -> Result<RunOutput<M>> {
        let done = self.start_epoch.max(self.cfg.epochs as u64);
        let p = self.files.final_checkpoint();
        self.checkpoint(&model, done).save(&p)?;
        Ok(RunOutput { model, epochs, checkpoints: self.written, final_checkpoint: p })
    }

    fn non_finite(&self) -> Error {
        Error::NonFiniteLoss { step: self.step, last_checkpoint: self.last_checkpoint.clone() }
    }
}

fn batches(patches: &DiffArray, batch_size: usize) -> impl Iterator<Item = DiffArray> + '_ {
    let shape = patches.shape().to_vec();
    let per: usize = shape[1..].iter().product();
    patches.data().chunks(batch_size * per).map(move |chunk| {
        let mut s = shape.clone();
        s[0] = chunk.len() / per;
        DiffArray::new(s, chunk.to_vec()).expect("chunk of a valid batch")
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fits the flow to clean patches by maximum likelihood. The logged loss is
/// the NLL in nats per dimension.
pub fn train_prior(
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunOutput<FlowModel>> {
    if cfg.stage != Stage::Prior {
        return Err(Error::Config("train_prior needs a prior-stage config".into()));
    }
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("clean corpus has no images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FlowModel::new(cfg.flow_arch(), &mut rng)?;
    let mut s = Session::open(cfg, ModelKind::Flow, out_dir, corpus.paths.clone(), &mut model, rng, resume)?;
    if s.start_epoch > 0 {
        model.mark_initialized();
    }
    let images: Vec<DiffArray> = corpus.images.iter().map(normalize).collect();
    let dims = model.input_spec().numel() as f64;
    let mut epochs = Vec::new();

    for epoch in s.start_epoch + 1..=cfg.epochs as u64 {
        let count = cfg.patches_per_image * images.len();
        let mut patches = extract_patches_from_arrays(&images, count, cfg.patch_size, &mut s.rng)?.data;
        if cfg.dequantize {
            for v in patches.data_mut() {
                *v += s.rng.random::<f64>() / 255.0;
            }
        }
        let mut losses = Vec::new();
        for x in batches(&patches, cfg.batch_size) {
            if !model.is_initialized() {
                model.initialize(&x)?;
            }
            let tape = Tape::new();
            let (nll, fwd) = model.nll(&tape, tape.constant(&x), ParamMode::Trainable)?;
            let loss = nll.mean_all().mul_scalar(1.0 / dims);
            let value = loss.item();
            if !value.is_finite() {
                return Err(s.non_finite());
            }
            let grads = tape.backward(loss)?;
            model.zero_grad();
            fwd.bindings.accumulate_grads(&grads, &mut model)?;
            s.adam.step(&mut model)?;
            s.step += 1;
            s.metrics.append(&MetricsRow {
                step: s.step,
                epoch,
                loss: value,
                fidelity: None,
                prior: None,
                psnr_val: None,
            })?;
            losses.push(value);
        }
        let summary =
            EpochSummary { epoch, step: s.step, loss: mean(&losses), fidelity: None, prior: None, psnr_val: None };
        log::info!("prior epoch {epoch}: nll/dim {:.6}", summary.loss);
        s.end_epoch(&model, &summary)?;
        epochs.push(summary);
    }
    s.finish(model, epochs)
}

/// Mean 8-bit PSNR of the denoised validation set at `sigma`.
pub fn validation_psnr(net: &DenoiserNet, validation: &Corpus, sigma: f64, seed: u64) -> Result<f64> {
    let seed = sigma_seed(seed, sigma);
    let mut total = 0.0;
    for (i, clean) in validation.images.iter().enumerate() {
        let noisy = noisy_image(clean, sigma, seed, i)?;
        total += psnr(clean, &denoise_image(net, &noisy)?)?;
    }
    Ok(total / validation.len() as f64)
}

/// Trains the denoiser on noisy patches against the frozen prior.
///
/// `prior_sources` are the images the prior was fitted on; sharing any of
/// them with `corpus` is an error.
pub fn train_denoiser(
    cfg: &TrainConfig,
    corpus: &Corpus,
    prior: &FlowModel,
    prior_sources: &[PathBuf],
    validation: Option<&Corpus>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunOutput<DenoiserNet>> {
    if cfg.stage != Stage::Denoiser {
        return Err(Error::Config("train_denoiser needs a denoiser-stage config".into()));
    }
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("noisy corpus has no images".into()));
    }
    check_disjoint(prior_sources, &corpus.paths)?;
    if let Some(v) = validation {
        check_disjoint(&v.paths, &corpus.paths)?;
        if v.is_empty() {
            return Err(Error::Empty("validation corpus has no images".into()));
        }
    }
    if cfg.loss.lambda > 0.0 {
        let spec = prior.input_spec();
        if (spec.channels, spec.height, spec.width) != (cfg.channels, cfg.patch_size, cfg.patch_size) {
            return Err(Error::Config(format!(
                "prior expects {}x{}x{} patches, config uses {}x{}x{}",
                spec.channels, spec.height, spec.width, cfg.channels, cfg.patch_size, cfg.patch_size
            )));
        }
    }

    let images: Vec<DiffArray> = corpus
        .images
        .iter()
        .enumerate()
        .map(
            |(i, img)| {
                if cfg.synthesize_noise {
                    training_noise(img, cfg.noise, cfg.seed, i)
                } else {
                    Ok(normalize(img))
                }
            },
        )
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = DenoiserNet::new(cfg.denoiser_arch(), &mut rng);
    let mut s = Session::open(cfg, ModelKind::Denoiser, out_dir, corpus.paths.clone(), &mut net, rng, resume)?;
    let mut epochs = Vec::new();

    for epoch in s.start_epoch + 1..=cfg.epochs as u64 {
        let count = cfg.patches_per_image * images.len();
        let patches = extract_patches_from_arrays(&images, count, cfg.patch_size, &mut s.rng)?.data;
        let (mut totals, mut fids, mut priors) = (Vec::new(), Vec::new(), Vec::new());
        let mut epoch_psnr = None;
        let last = batches(&patches, cfg.batch_size).count();
        for (b, y) in batches(&patches, cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let yv = tape.constant(&y);
            let (xh, bindings) = net.forward(&tape, yv, ParamMode::Trainable)?;
            let loss = denoise_loss(&cfg.loss, yv, xh, prior)?;
            let (total, fid) = (loss.total.item(), loss.fidelity.item());
            let pr = loss.prior.map_or(0.0, |p| p.item());
            if !total.is_finite() {
                return Err(s.non_finite());
            }
            let grads = tape.backward(loss.total)?;
            net.zero_grad();
            bindings.accumulate_grads(&grads, &mut net)?;
            s.adam.step(&mut net)?;
            s.step += 1;
            totals.push(total);
            fids.push(fid);
            priors.push(pr);
            let psnr_val = match validation {
                Some(v) if b + 1 == last => Some(validation_psnr(&net, v, cfg.validation_sigma, cfg.seed)?),
                _ => None,
            };
            s.metrics.append(&MetricsRow {
                step: s.step,
                epoch,
                loss: total,
                fidelity: Some(fid),
                prior: Some(pr),
                psnr_val,
            })?;
            if let Some(p) = psnr_val {
                log::info!("denoiser epoch {epoch}: validation PSNR {p:.3} dB");
                epoch_psnr = psnr_val;
            }
        }
        let summary = EpochSummary {
            epoch,
            step: s.step,
            loss: mean(&totals),
            fidelity: Some(mean(&fids)),
            prior: Some(mean(&priors)),
            psnr_val: epoch_psnr,
        };
        log::info!(
            "denoiser epoch {epoch}: loss {:.6e} fidelity {:.6e} prior {:.6}",
            summary.loss,
            mean(&fids),
            mean(&priors)
        );
        s.end_epoch(&net, &summary)?;
        epochs.push(summary);
    }
    s.finish(net, epochs)
}
