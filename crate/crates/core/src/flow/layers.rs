use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, ParamMode};
use crate::tensor::{linalg, DiffArray, Padding, Tape, Var};

/// Per-channel affine map `y = s * x + b` with `logdet = H*W*sum(log|s|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub scale: DiffArray,
    pub bias: DiffArray,
    initialized: bool,
}

impl ActNorm {
    /// An uninitialised layer; the first batch it sees sets its parameters.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: DiffArray::full([channels], 1.0).with_grad(),
            bias: DiffArray::zeros([channels]).with_grad(),
            initialized: false,
        }
    }

    pub fn with_params(scale: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::ShapeMismatch { op: "actnorm", lhs: vec![scale.len()], rhs: vec![bias.len()] });
        }
        let c = scale.len();
        Ok(Self {
            scale: DiffArray::new([c], scale)?.with_grad(),
            bias: DiffArray::new([c], bias)?.with_grad(),
            initialized: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Data-dependent initialisation: afterwards the layer maps `x` to zero
    /// mean and unit variance per channel.
    pub fn initialize(&mut self, x: &DiffArray) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::InvalidShape {
                op: "actnorm",
                shape: shape.to_vec(),
                reason: format!("expected NCHW with {} channels", self.channels()),
            });
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = (n * hw) as f64;
        for ch in 0..c {
            let values = || (0..n).flat_map(move |b| x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter());
            let mean = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            let std = var.sqrt().max(1e-6);
            self.scale.data_mut()[ch] = 1.0 / std;
            self.bias.data_mut()[ch] = -mean / std;
        }
        self.initialized = true;
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
        prefix: &str,
        bindings: &mut Bindings<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if !self.initialized {
            return Err(Error::Uninitialized(prefix.to_string()));
        }
        check_channels("actnorm", &x.shape(), self.channels())?;
        if let Some(i) = self.scale.data().iter().position(|&s| s == 0.0) {
            return Err(Error::Degenerate(format!("{prefix}: actnorm scale[{i}] is zero")));
        }
        let s = bindings.bind(tape, format!("{prefix}.scale"), &self.scale, mode);
        let b = bindings.bind(tape, format!("{prefix}.bias"), &self.bias, mode);
        let shape = x.shape();
        let hw = (shape[2] * shape[3]) as f64;
        let y = x.mul(&s)?.add(&b)?;
        // log|s| = ln(s^2) / 2
        let logdet = s.square().ln()?.sum_all().mul_scalar(0.5 * hw);
        Ok((y, logdet))
    }

    pub fn inverse(&self, y: &DiffArray) -> Result<DiffArray> {
        check_channels("actnorm", y.shape(), self.channels())?;
        let shape = y.shape();
        let inner = shape[2] * shape[3];
        let c = self.channels();
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                (v - self.bias.data()[ch]) / self.scale.data()[ch]
            })
            .collect();
        DiffArray::new(shape.to_vec(), data)
    }
}

/// Invertible 1x1 convolution: every pixel's channel vector is multiplied by
/// the square matrix `W`; `logdet = H*W*log|det W|`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvConv1x1 {
    pub weight: DiffArray,
}

impl InvConv1x1 {
    pub fn identity(channels: usize) -> Self {
        let mut w = DiffArray::zeros([channels, channels]);
        for i in 0..channels {
            w.data_mut()[i * channels + i] = 1.0;
        }
        Self { weight: w.with_grad() }
    }

    pub fn from_matrix(channels: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self { weight: DiffArray::new([channels, channels], data)?.with_grad() })
    }

    /// A random orthogonal matrix, so `log|det W| = 0` at initialisation.
    pub fn random_rotation(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut data: Vec<f64> = (0..channels * channels).map(|_| rng.sample(StandardNormal)).collect();
        linalg::orthonormalize(&mut data, channels)?;
        Self::from_matrix(channels, data)
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
        prefix: &str,
        bindings: &mut Bindings<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.channels();
        check_channels("invconv", &x.shape(), c)?;
        let w = bindings.bind(tape, format!("{prefix}.weight"), &self.weight, mode);
        let logdet_w = w.log_abs_det()?;
        let shape = x.shape();
        let hw = (shape[2] * shape[3]) as f64;
        let y = x.conv2d(&w.reshape([c, c, 1, 1])?, Padding::Valid)?;
        Ok((y, logdet_w.mul_scalar(hw)))
    }

    pub fn inverse(&self, y: &DiffArray) -> Result<DiffArray> {
        let c = self.channels();
        check_channels("invconv", y.shape(), c)?;
        let inv = linalg::inverse(self.weight.data(), c)?;
        let tape = Tape::new();
        let w = tape.constant_from([c, c, 1, 1], inv)?;
        Ok(tape.constant(y).conv2d(&w, Padding::Valid)?.to_array())
    }
}

/// Additive coupling: the second channel half is shifted by a CNN of the
/// first half, `y2 = x2 + m(x1)`. The Jacobian is unit lower-triangular, so
/// the layer contributes no log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveCoupling {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl AdditiveCoupling {
    /// `m` = 3x3 conv -> ReLU -> 1x1 conv -> ReLU -> 3x3 conv, with the last
    /// convolution zeroed so the layer starts as the identity.
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "coupling",
                shape: vec![channels],
                reason: "odd channel count".into(),
            });
        }
        let half = channels / 2;
        Ok(Self {
            conv1: Conv::random(hidden, half, 3, Padding::SameZero, rng),
            conv2: Conv::random(hidden, hidden, 1, Padding::SameZero, rng),
            conv3: Conv::zeros(half, hidden, 3, Padding::SameZero),
        })
    }

    pub fn from_convs(conv1: Conv, conv2: Conv, conv3: Conv) -> Result<Self> {
        if conv3.out_channels() != conv1.in_channels()
            || conv2.in_channels() != conv1.out_channels()
            || conv3.in_channels() != conv2.out_channels()
        {
            return Err(Error::InvalidShape {
                op: "coupling",
                shape: vec![conv1.in_channels(), conv1.out_channels(), conv3.out_channels()],
                reason: "subnetwork must map C/2 channels to C/2 channels".into(),
            });
        }
        Ok(Self { conv1, conv2, conv3 })
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels() * 2
    }

    fn shift<'t>(
        &self,
        tape: &'t Tape,
        x1: Var<'t>,
        mode: ParamMode,
        prefix: &str,
        bindings: &mut Bindings<'t>,
    ) -> Result<Var<'t>> {
        let h = self.conv1.forward(tape, x1, mode, &format!("{prefix}.conv1"), bindings)?.relu();
        let h = self.conv2.forward(tape, h, mode, &format!("{prefix}.conv2"), bindings)?.relu();
        self.conv3.forward(tape, h, mode, &format!("{prefix}.conv3"), bindings)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
        prefix: &str,
        bindings: &mut Bindings<'t>,
    ) -> Result<Var<'t>> {
        check_channels("coupling", &x.shape(), self.channels())?;
        let (x1, x2) = x.channel_split()?;
        let m = self.shift(tape, x1, mode, prefix, bindings)?;
        x1.channel_concat(&x2.add(&m)?)
    }

    /// `x2 = y2 - m(y1)`.
    pub fn inverse(&self, y: &DiffArray) -> Result<DiffArray> {
        check_channels("coupling", y.shape(), self.channels())?;
        let tape = Tape::new();
        let mut scratch = Bindings::new();
        let (y1, y2) = tape.constant(y).channel_split()?;
        let m = self.shift(&tape, y1, ParamMode::Frozen, "inverse", &mut scratch)?;
        Ok(y1.channel_concat(&y2.sub(&m)?)?.to_array())
    }
}

pub(crate) fn check_channels(op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected NCHW with {channels} channels"),
        });
    }
    Ok(())
}
