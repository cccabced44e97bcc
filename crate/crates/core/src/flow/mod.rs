//! Normalizing-flow prior over image patches.
//!
//! A [`FlowModel`] maps a patch `x` to a latent `z` through a chain of
//! invertible layers and tracks `sum_i log|det dZ_i/dZ_{i-1}|`. Under a
//! standard-normal latent, the negative log-likelihood (without the Gaussian
//! normalising constant) is `0.5 * |z|^2 - log_det_sum`.

mod layers;

use rand::Rng;

pub use layers::{ActNorm, AdditiveCoupling, InvConv1x1};

use crate::error::{Error, Result};
use crate::nn::{Bindings, ParamMode, Parameterized};
use crate::tensor::{DiffArray, Tape, Var};

/// One step of the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayer {
    ActNorm(ActNorm),
    InvConv(InvConv1x1),
    Coupling(AdditiveCoupling),
    /// 2x2 space-to-channel reshaping (see [`crate::tensor::Var::squeeze2x2`]).
    Squeeze,
}

impl FlowLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::ActNorm(_) => "actnorm",
            FlowLayer::InvConv(_) => "invconv",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Squeeze => "squeeze",
        }
    }

    fn output_spec(&self, spec: InputSpec) -> Result<InputSpec> {
        let InputSpec { channels, height, width } = spec;
        let wrong = |reason: String| Error::InvalidShape {
            op: "flow layer chain",
            shape: vec![channels, height, width],
            reason,
        };
        match self {
            FlowLayer::Squeeze => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(wrong("squeeze needs even spatial dimensions".into()));
                }
                Ok(InputSpec { channels: channels * 4, height: height / 2, width: width / 2 })
            }
            FlowLayer::ActNorm(a) if a.channels() != channels => {
                Err(wrong(format!("actnorm has {} channels", a.channels())))
            }
            FlowLayer::InvConv(w) if w.channels() != channels => {
                Err(wrong(format!("invconv has {} channels", w.channels())))
            }
            FlowLayer::Coupling(c) if c.channels() != channels => {
                Err(wrong(format!("coupling has {} channels", c.channels())))
            }
            _ => Ok(spec),
        }
    }
}

/// Shape `(C, H, W)` of a single input patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Multi-level recipe: each level is a squeeze followed by `steps_per_level`
/// repetitions of actnorm -> 1x1 conv -> additive coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArch {
    pub channels: usize,
    pub patch_size: usize,
    pub levels: usize,
    pub steps_per_level: usize,
    pub hidden: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self { channels: 1, patch_size: 32, levels: 2, steps_per_level: 4, hidden: 64 }
    }
}

/// Result of a forward pass `x -> z`.
#[derive(Debug)]
pub struct FlowForward<'t> {
    pub z: Var<'t>,
    /// Shape `[N]`: the summed log-determinant for each batch item.
    pub log_det_sum: Var<'t>,
    /// Each layer's log-determinant contribution (identical across the batch).
    pub layer_log_dets: Vec<f64>,
    pub bindings: Bindings<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    input: InputSpec,
    layers: Vec<FlowLayer>,
    arch: Option<FlowArch>,
}

impl FlowModel {
    pub fn new(arch: FlowArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.levels == 0 || !arch.patch_size.is_multiple_of(1 << arch.levels) {
            return Err(Error::Config(format!(
                "patch size {} must be divisible by 2^{}",
                arch.patch_size, arch.levels
            )));
        }
        let mut layers = Vec::new();
        let mut c = arch.channels;
        for _ in 0..arch.levels {
            layers.push(FlowLayer::Squeeze);
            c *= 4;
            for _ in 0..arch.steps_per_level {
                layers.push(FlowLayer::ActNorm(ActNorm::new(c)));
                layers.push(FlowLayer::InvConv(InvConv1x1::random_rotation(c, rng)?));
                layers.push(FlowLayer::Coupling(AdditiveCoupling::new(c, arch.hidden, rng)?));
            }
        }
        let input = InputSpec { channels: arch.channels, height: arch.patch_size, width: arch.patch_size };
        let mut model = Self::from_layers(input, layers)?;
        model.arch = Some(arch);
        Ok(model)
    }

    /// Builds a model from an explicit layer list, validating the shape chain.
    pub fn from_layers(input: InputSpec, layers: Vec<FlowLayer>) -> Result<Self> {
        let mut spec = input;
        for layer in &layers {
            let next = layer.output_spec(spec)?;
            debug_assert_eq!(next.numel(), spec.numel());
            spec = next;
        }
        Ok(Self { input, layers, arch: None })
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn arch(&self) -> Option<FlowArch> {
        self.arch
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            FlowLayer::ActNorm(a) => a.is_initialized(),
            _ => true,
        })
    }

    pub(crate) fn mark_initialized(&mut self) {
        for l in &mut self.layers {
            if let FlowLayer::ActNorm(a) = l {
                a.mark_initialized();
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.input;
        if shape.len() != 4 || shape[1..] != [s.channels, s.height, s.width] {
            return Err(Error::InvalidShape {
                op: "flow_forward",
                shape: shape.to_vec(),
                reason: format!("expected N x {} x {} x {}", s.channels, s.height, s.width),
            });
        }
        Ok(())
    }

    /// Runs data-dependent initialisation of every uninitialised actnorm,
    /// in order, on the batch `x`.
    pub fn initialize(&mut self, x: &DiffArray) -> Result<()> {
        self.check_input(x.shape())?;
        let mut act = x.clone();
        for i in 0..self.layers.len() {
            if let FlowLayer::ActNorm(a) = &mut self.layers[i] {
                if !a.is_initialized() {
                    a.initialize(&act)?;
                }
            }
            let tape = Tape::new();
            let mut scratch = Bindings::new();
            let (y, _) = self.layer_forward(i, &tape, tape.constant(&act), ParamMode::Frozen, &mut scratch)?;
            act = y.to_array();
        }
        Ok(())
    }

    fn layer_forward<'t>(
        &self,
        i: usize,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
        bindings: &mut Bindings<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let prefix = format!("layers.{i}");
        Ok(match &self.layers[i] {
            FlowLayer::ActNorm(a) => {
                let (y, ld) = a.forward(tape, x, mode, &prefix, bindings)?;
                (y, Some(ld))
            }
            FlowLayer::InvConv(w) => {
                let (y, ld) = w.forward(tape, x, mode, &prefix, bindings)?;
                (y, Some(ld))
            }
            FlowLayer::Coupling(c) => (c.forward(tape, x, mode, &prefix, bindings)?, None),
            FlowLayer::Squeeze => (x.squeeze2x2()?, None),
        })
    }

    /// `x -> z` with the summed per-item log-determinant.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: ParamMode) -> Result<FlowForward<'t>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let mut bindings = Bindings::new();
        let mut log_det_sum = tape.constant(&DiffArray::zeros([shape[0]]));
        let mut layer_log_dets = Vec::with_capacity(self.layers.len());
        let mut z = x;
        for i in 0..self.layers.len() {
            let (y, ld) = self.layer_forward(i, tape, z, mode, &mut bindings)?;
            z = y;
            match ld {
                Some(ld) => {
                    layer_log_dets.push(ld.item());
                    log_det_sum = log_det_sum.add(&ld)?;
                }
                None => layer_log_dets.push(0.0),
            }
        }
        if let Some(bad) = log_det_sum.value().iter().find(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite log-determinant {bad}")));
        }
        Ok(FlowForward { z, log_det_sum, layer_log_dets, bindings })
    }

    /// Like [`forward`](Self::forward), initialising any actnorm layers on
    /// this batch first.
    pub fn forward_init<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: ParamMode) -> Result<FlowForward<'t>> {
        if !self.is_initialized() {
            self.initialize(&x.to_array())?;
        }
        self.forward(tape, x, mode)
    }

    /// Per-item `0.5 * |z|^2 - log_det_sum`, shape `[N]`.
    pub fn nll<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: ParamMode) -> Result<(Var<'t>, FlowForward<'t>)> {
        let fwd = self.forward(tape, x, mode)?;
        let half_sq = fwd.z.square().sum(&[1, 2, 3])?.mul_scalar(0.5);
        let nll = half_sq.sub(&fwd.log_det_sum)?;
        Ok((nll, fwd))
    }

    /// Per-item NLL values without keeping a tape around.
    pub fn nll_values(&self, x: &DiffArray) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let (nll, _) = self.nll(&tape, tape.constant(x), ParamMode::Frozen)?;
        Ok(nll.value())
    }

    /// Maps latents back to inputs. Only used for verification.
    pub fn inverse(&self, z: &DiffArray) -> Result<DiffArray> {
        let mut x = z.clone();
        for layer in self.layers.iter().rev() {
            x = match layer {
                FlowLayer::ActNorm(a) => {
                    if !a.is_initialized() {
                        return Err(Error::Uninitialized("actnorm in inverse".into()));
                    }
                    a.inverse(&x)?
                }
                FlowLayer::InvConv(w) => w.inverse(&x)?,
                FlowLayer::Coupling(c) => c.inverse(&x)?,
                FlowLayer::Squeeze => {
                    let tape = Tape::new();
                    tape.constant(&x).unsqueeze2x2()?.to_array()
                }
            };
        }
        Ok(x)
    }
}

impl Parameterized for FlowModel {
    fn parameters(&self) -> Vec<(String, &DiffArray)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            match layer {
                FlowLayer::ActNorm(a) => {
                    out.push((format!("{p}.scale"), &a.scale));
                    out.push((format!("{p}.bias"), &a.bias));
                }
                FlowLayer::InvConv(w) => out.push((format!("{p}.weight"), &w.weight)),
                FlowLayer::Coupling(c) => {
                    c.conv1.params(&format!("{p}.conv1"), &mut out);
                    c.conv2.params(&format!("{p}.conv2"), &mut out);
                    c.conv3.params(&format!("{p}.conv3"), &mut out);
                }
                FlowLayer::Squeeze => {}
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut DiffArray)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            match layer {
                FlowLayer::ActNorm(a) => {
                    out.push((format!("{p}.scale"), &mut a.scale));
                    out.push((format!("{p}.bias"), &mut a.bias));
                }
                FlowLayer::InvConv(w) => out.push((format!("{p}.weight"), &mut w.weight)),
                FlowLayer::Coupling(c) => {
                    c.conv1.params_mut(&format!("{p}.conv1"), &mut out);
                    c.conv2.params_mut(&format!("{p}.conv2"), &mut out);
                    c.conv3.params_mut(&format!("{p}.conv3"), &mut out);
                }
                FlowLayer::Squeeze => {}
            }
        }
        out
    }
}
