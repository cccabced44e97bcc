use std::fmt::Write as _;
use std::path::Path;

use crate::data::NoiseSpec;
use crate::denoiser::{DenoiseLossConfig, DenoiserArch, FidelityReduction, PriorReduction};
use crate::error::{Error, Result};
use crate::flow::FlowArch;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prior,
    Denoiser,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Patches drawn per image per epoch.
    pub patches_per_image: usize,
    pub adam: AdamConfig,
    pub loss: DenoiseLossConfig,
    /// Training noise for stage two.
    pub noise: NoiseSpec,
    /// Synthesize noise on the stage-two images; off means they are already noisy.
    pub synthesize_noise: bool,
    /// Add uniform dequantization noise to clean patches in stage one.
    pub dequantize: bool,
    pub validation_sigma: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub channels: usize,
    pub flow_levels: usize,
    pub flow_steps: usize,
    pub flow_hidden: usize,
    pub denoiser_features: usize,
    pub denoiser_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let flow = FlowArch::default();
        let den = DenoiserArch::default();
        Self {
            stage: Stage::Prior,
            epochs: 100,
            batch_size: 64,
            patch_size: 32,
            patches_per_image: 8,
            adam: AdamConfig::default(),
            loss: DenoiseLossConfig::default(),
            noise: NoiseSpec::default(),
            synthesize_noise: true,
            dequantize: false,
            validation_sigma: 25.0,
            seed: 0,
            checkpoint_every: 10,
            channels: flow.channels,
            flow_levels: flow.levels,
            flow_steps: flow.steps_per_level,
            flow_hidden: flow.hidden,
            denoiser_features: den.features,
            denoiser_blocks: den.blocks,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn flow_arch(&self) -> FlowArch {
        FlowArch {
            channels: self.channels,
            patch_size: self.patch_size,
            levels: self.flow_levels,
            steps_per_level: self.flow_steps,
            hidden: self.flow_hidden,
        }
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch { channels: self.channels, features: self.denoiser_features, blocks: self.denoiser_blocks }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("patches_per_image", self.patches_per_image),
            ("channels", self.channels),
            ("flow_levels", self.flow_levels),
            ("flow_steps", self.flow_steps),
            ("flow_hidden", self.flow_hidden),
            ("denoiser_features", self.denoiser_features),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.patch_size.is_multiple_of(1 << self.flow_levels) {
            return Err(Error::Config(format!(
                "patch_size {} is not divisible by 2^{}",
                self.patch_size, self.flow_levels
            )));
        }
        if !(self.validation_sigma >= 0.0) {
            return Err(Error::Config("validation_sigma must be >= 0".into()));
        }
        self.adam.validate()?;
        self.noise.validate()?;
        // Lambda is unused in stage one.
        if self.stage == Stage::Denoiser {
            self.loss.validate()?;
        }
        Ok(())
    }

    /// Flat `key = value` text, one key per line, parseable by [`TrainConfig::apply_text`].
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "stage",
            match self.stage {
                Stage::Prior => "\"prior\"",
                Stage::Denoiser => "\"denoiser\"",
            }
            .into(),
        );
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("patches_per_image", self.patches_per_image.to_string());
        kv("lr", float(self.adam.lr));
        kv("beta1", float(self.adam.beta1));
        kv("beta2", float(self.adam.beta2));
        kv("eps", float(self.adam.eps));
        kv("max_grad_norm", float(self.adam.max_grad_norm.unwrap_or(0.0)));
        kv("lambda", float(self.loss.lambda));
        kv("blur", self.loss.blur_kernel.to_string());
        kv(
            "fidelity_reduction",
            match self.loss.fidelity {
                FidelityReduction::Mean => "\"mean\"",
                FidelityReduction::Sum => "\"sum\"",
            }
            .into(),
        );
        kv(
            "prior_reduction",
            match self.loss.prior {
                PriorReduction::PerDim => "\"per_dim\"",
                PriorReduction::PerItem => "\"per_item\"",
            }
            .into(),
        );
        kv("sigma_min", float(self.noise.sigma_min));
        kv("sigma_max", float(self.noise.sigma_max));
        kv("synthesize_noise", self.synthesize_noise.to_string());
        kv("dequantize", self.dequantize.to_string());
        kv("validation_sigma", float(self.validation_sigma));
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("channels", self.channels.to_string());
        kv("flow_levels", self.flow_levels.to_string());
        kv("flow_steps", self.flow_steps.to_string());
        kv("flow_hidden", self.flow_hidden.to_string());
        kv("denoiser_features", self.denoiser_features.to_string());
        kv("denoiser_blocks", self.denoiser_blocks.to_string());
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<toml::Table> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_table(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let table = parse_table(text)?;
        for (k, v) in &table {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one key from a config-file value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &toml::Value) -> Result<()> {
        let bad = || Error::Config(format!("bad value for {key}: {value}"));
        let uint = || -> Result<usize> { value.as_integer().and_then(|i| usize::try_from(i).ok()).ok_or_else(bad) };
        let num =
            || -> Result<f64> { value.as_float().or_else(|| value.as_integer().map(|i| i as f64)).ok_or_else(bad) };
        let flag = || value.as_bool().ok_or_else(bad);
        let text = || value.as_str().ok_or_else(bad);
        match key {
            "stage" => {
                self.stage = match text()? {
                    "prior" => Stage::Prior,
                    "denoiser" => Stage::Denoiser,
                    _ => return Err(bad()),
                }
            }
            "epochs" => self.epochs = uint()?,
            "batch_size" => self.batch_size = uint()?,
            "patch_size" => self.patch_size = uint()?,
            "patches_per_image" => self.patches_per_image = uint()?,
            "lr" => self.adam.lr = num()?,
            "beta1" => self.adam.beta1 = num()?,
            "beta2" => self.adam.beta2 = num()?,
            "eps" => self.adam.eps = num()?,
            "max_grad_norm" => {
                let v = num()?;
                self.adam.max_grad_norm = (v != 0.0).then_some(v);
            }
            "lambda" => self.loss.lambda = num()?,
            "blur" => self.loss.blur_kernel = uint()?,
            "fidelity_reduction" => {
                self.loss.fidelity = match text()? {
                    "mean" => FidelityReduction::Mean,
                    "sum" => FidelityReduction::Sum,
                    _ => return Err(bad()),
                }
            }
            "prior_reduction" => {
                self.loss.prior = match text()? {
                    "per_dim" => PriorReduction::PerDim,
                    "per_item" => PriorReduction::PerItem,
                    _ => return Err(bad()),
                }
            }
            "sigma_min" => self.noise.sigma_min = num()?,
            "sigma_max" => self.noise.sigma_max = num()?,
            "synthesize_noise" => self.synthesize_noise = flag()?,
            "dequantize" => self.dequantize = flag()?,
            "validation_sigma" => self.validation_sigma = num()?,
            "seed" => self.seed = value.as_integer().and_then(|i| u64::try_from(i).ok()).ok_or_else(bad)?,
            "checkpoint_every" => self.checkpoint_every = uint()?,
            "channels" => self.channels = uint()?,
            "flow_levels" => self.flow_levels = uint()?,
            "flow_steps" => self.flow_steps = uint()?,
            "flow_hidden" => self.flow_hidden = uint()?,
            "denoiser_features" => self.denoiser_features = uint()?,
            "denoiser_blocks" => self.denoiser_blocks = uint()?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array()) {
        return Err(Error::Config(format!("config must be flat key = value pairs; {k:?} is nested")));
    }
    Ok(table)
}

/// Shortest round-trip form that is also a TOML float.
fn float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}
