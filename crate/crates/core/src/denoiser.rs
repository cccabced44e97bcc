//! Residual CNN denoiser and the unpaired training loss that couples a
//! blurred data term with the frozen flow prior.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{Bindings, Conv, ParamMode, Parameterized};
use crate::tensor::{DiffArray, Padding, Tape, Var};

/// Smallest height and width the network accepts.
pub const MIN_SPATIAL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserArch {
    pub channels: usize,
    pub features: usize,
    pub blocks: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { channels: 1, features: 64, blocks: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// `x_hat = y + out(body(y))`, where body is a 3x3 conv + ReLU followed by
/// residual blocks `h + conv2(relu(conv1(h)))`. The output conv starts at
/// zero, so a fresh network is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    arch: DenoiserArch,
    pub input: Conv,
    pub blocks: Vec<ResBlock>,
    pub output: Conv,
}

impl DenoiserNet {
    pub fn new(arch: DenoiserArch, rng: &mut impl Rng) -> Self {
        let (c, f) = (arch.channels, arch.features);
        let pad = Padding::SameZero;
        let blocks = (0..arch.blocks)
            .map(|_| ResBlock {
                conv1: Conv::random(f, f, 3, pad, rng),
                // Scaled down so the residual branches start small.
                conv2: Conv::random_with_std(f, f, 3, pad, 0.1 / ((9 * f) as f64).sqrt(), rng),
            })
            .collect();
        Self { arch, input: Conv::random(f, c, 3, pad, rng), blocks, output: Conv::zeros(c, f, 3, pad) }
    }

    pub fn arch(&self) -> DenoiserArch {
        self.arch
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.arch.channels {
            return Err(Error::InvalidShape {
                op: "denoise_forward",
                shape: shape.to_vec(),
                reason: format!("expected N x {} x H x W", self.arch.channels),
            });
        }
        if shape[2] < MIN_SPATIAL || shape[3] < MIN_SPATIAL {
            return Err(Error::InvalidShape {
                op: "denoise_forward",
                shape: shape.to_vec(),
                reason: format!("spatial size below {MIN_SPATIAL}x{MIN_SPATIAL}"),
            });
        }
        Ok(())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, y: Var<'t>, mode: ParamMode) -> Result<(Var<'t>, Bindings<'t>)> {
        self.check_input(&y.shape())?;
        let mut b = Bindings::new();
        let mut h = self.input.forward(tape, y, mode, "input", &mut b)?.relu();
        for (i, block) in self.blocks.iter().enumerate() {
            let r = block.conv1.forward(tape, h, mode, &format!("blocks.{i}.conv1"), &mut b)?.relu();
            let r = block.conv2.forward(tape, r, mode, &format!("blocks.{i}.conv2"), &mut b)?;
            h = h.add(&r)?;
        }
        let out = self.output.forward(tape, h, mode, "output", &mut b)?;
        Ok((y.add(&out)?, b))
    }

    /// Inference on a batch without gradient tracking. Output is not clamped.
    pub fn denoise(&self, y: &DiffArray) -> Result<DiffArray> {
        let tape = Tape::new();
        let (x, _) = self.forward(&tape, tape.constant(y), ParamMode::Frozen)?;
        Ok(x.to_array())
    }
}

impl Parameterized for DenoiserNet {
    fn parameters(&self) -> Vec<(String, &DiffArray)> {
        let mut out = Vec::new();
        self.input.params("input", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.params(&format!("blocks.{i}.conv1"), &mut out);
            b.conv2.params(&format!("blocks.{i}.conv2"), &mut out);
        }
        self.output.params("output", &mut out);
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut DiffArray)> {
        let mut out = Vec::new();
        self.input.params_mut("input", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.params_mut(&format!("blocks.{i}.conv1"), &mut out);
            b.conv2.params_mut(&format!("blocks.{i}.conv2"), &mut out);
        }
        self.output.params_mut("output", &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelityReduction {
    /// Mean over pixels, channels and batch.
    Mean,
    /// Sum over pixels and channels, mean over batch.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorReduction {
    /// Per-item NLL divided by the element count, averaged over the batch.
    PerDim,
    /// Per-item NLL, averaged over the batch.
    PerItem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseLossConfig {
    pub lambda: f64,
    pub blur_kernel: usize,
    pub fidelity: FidelityReduction,
    pub prior: PriorReduction,
}

impl Default for DenoiseLossConfig {
    fn default() -> Self {
        Self { lambda: 1.5e-6, blur_kernel: 3, fidelity: FidelityReduction::Mean, prior: PriorReduction::PerDim }
    }
}

impl DenoiseLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.blur_kernel == 0 || self.blur_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("blur kernel must be odd and positive, got {}", self.blur_kernel)));
        }
        Ok(())
    }
}

/// The two terms of the loss and their weighted sum, all one-element vars.
#[derive(Debug)]
pub struct DenoiseLoss<'t> {
    pub total: Var<'t>,
    pub fidelity: Var<'t>,
    /// Reduced flow NLL of `x_hat`; `None` when `lambda == 0`.
    pub prior: Option<Var<'t>>,
}

/// Per-channel `k x k` box filter with reflect padding.
pub fn local_mean_blur<'t>(x: Var<'t>, k: usize) -> Result<Var<'t>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!("blur kernel must be odd, got {k}")));
    }
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidShape { op: "local_mean_blur", shape, reason: "expected NCHW".into() });
    }
    if k > shape[2].min(shape[3]) {
        return Err(Error::InvalidShape {
            op: "local_mean_blur",
            shape,
            reason: format!("kernel {k} exceeds spatial size"),
        });
    }
    let c = shape[1];
    let kk = k * k;
    let mut w = vec![0.0; c * c * kk];
    for ch in 0..c {
        w[(ch * c + ch) * kk..(ch * c + ch + 1) * kk].fill(1.0 / kk as f64);
    }
    let w = x.tape().constant_from([c, c, k, k], w)?;
    x.conv2d(&w, Padding::SameReflect)
}

/// `fidelity(B(y), B(x_hat)) + lambda * prior(x_hat)`, with the flow frozen.
pub fn denoise_loss<'t>(
    config: &DenoiseLossConfig,
    y: Var<'t>,
    x_hat: Var<'t>,
    flow: &FlowModel,
) -> Result<DenoiseLoss<'t>> {
    config.validate()?;
    let (sy, sx) = (y.shape(), x_hat.shape());
    if sy != sx {
        return Err(Error::ShapeMismatch { op: "denoise_loss", lhs: sy, rhs: sx });
    }
    let diff = local_mean_blur(y, config.blur_kernel)?.sub(&local_mean_blur(x_hat, config.blur_kernel)?)?;
    let sq = diff.square();
    let fidelity = match config.fidelity {
        FidelityReduction::Mean => sq.mean_all(),
        FidelityReduction::Sum => sq.sum_all().mul_scalar(1.0 / sx[0] as f64),
    };
    if config.lambda == 0.0 {
        return Ok(DenoiseLoss { total: fidelity, fidelity, prior: None });
    }
    let spec = flow.input_spec();
    if sx[1..] != [spec.channels, spec.height, spec.width] {
        return Err(Error::InvalidShape {
            op: "denoise_loss",
            shape: sx,
            reason: format!("prior expects {}x{}x{} patches", spec.channels, spec.height, spec.width),
        });
    }
    let (nll, _) = flow.nll(x_hat.tape(), x_hat, ParamMode::Frozen)?;
    let per_item = nll.mean_all();
    let prior = match config.prior {
        PriorReduction::PerDim => per_item.mul_scalar(1.0 / spec.numel() as f64),
        PriorReduction::PerItem => per_item,
    };
    let total = fidelity.add(&prior.mul_scalar(config.lambda))?;
    Ok(DenoiseLoss { total, fidelity, prior: Some(prior) })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::flow::{ActNorm, FlowLayer, InputSpec};

    fn blur_values(x: &DiffArray, k: usize) -> Vec<f64> {
        let tape = Tape::new();
        local_mean_blur(tape.constant(x), k).unwrap().value()
    }

    #[test]
    fn zero_initialised_net_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenoiserNet::new(DenoiserArch::default(), &mut rng);
        let y = crate::nn::gaussian_array(&[1, 1, 48, 48], 0.3, &mut rng);
        let out = net.denoise(&y).unwrap();
        assert_eq!(out.shape(), &[1, 1, 48, 48]);
        assert_eq!(out, y);
    }

    #[test]
    fn fully_convolutional_shapes_and_minimum_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let arch = DenoiserArch { channels: 1, features: 4, blocks: 1 };
        let mut net = DenoiserNet::new(arch, &mut rng);
        net.output = Conv::random(1, 4, 3, Padding::SameZero, &mut rng);
        assert_eq!(net.denoise(&DiffArray::zeros([2, 1, 9, 13])).unwrap().shape(), &[2, 1, 9, 13]);
        assert!(net.denoise(&DiffArray::zeros([1, 1, 8, 20])).is_err());
        assert!(net.denoise(&DiffArray::zeros([1, 3, 12, 12])).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let x = DiffArray::full([1, 2, 6, 5], 0.42);
        for v in blur_values(&x, 3) {
            assert!((v - 0.42).abs() < 1e-15);
        }
        for v in blur_values(&x, 5) {
            assert!((v - 0.42).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_center_of_three_by_three() {
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = DiffArray::new([1, 1, 3, 3], data).unwrap();
        assert!((blur_values(&x, 3)[4] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn blur_of_impulse() {
        let mut x = DiffArray::zeros([1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let b = blur_values(&x, 3);
        for r in 0..5 {
            for c in 0..5 {
                let v = b[r * 5 + c];
                if (1..=3).contains(&r) && (1..=3).contains(&c) {
                    assert!((v - 1.0 / 9.0).abs() < 1e-15);
                } else {
                    assert_eq!(v, 0.0, "border ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn blur_rejects_even_or_oversized_kernels() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::zeros([1, 1, 4, 4]));
        assert!(matches!(local_mean_blur(x, 2), Err(Error::Config(_))));
        assert!(local_mean_blur(x, 5).is_err());
    }

    #[test]
    fn blur_is_per_channel() {
        let mut x = DiffArray::zeros([1, 2, 3, 3]);
        x.data_mut()[4] = 9.0;
        let b = blur_values(&x, 3);
        assert!(b[9..].iter().all(|&v| v == 0.0));
    }

    fn tiny_flow() -> FlowModel {
        FlowModel::from_layers(
            InputSpec { channels: 1, height: 4, width: 4 },
            vec![FlowLayer::ActNorm(ActNorm::with_params(vec![1.7], vec![0.2]).unwrap())],
        )
        .unwrap()
    }

    #[test]
    fn zero_lambda_and_identity_output_gives_zero_loss() {
        let flow = tiny_flow();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = tape.constant(&crate::nn::gaussian_array(&[2, 1, 4, 4], 1.0, &mut rng));
        let cfg = DenoiseLossConfig { lambda: 0.0, ..Default::default() };
        let loss = denoise_loss(&cfg, y, y, &flow).unwrap();
        assert_eq!(loss.total.item(), 0.0);
        assert!(loss.prior.is_none());
    }

    #[test]
    fn loss_decomposes_into_independent_terms() {
        let flow = tiny_flow();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ya = crate::nn::gaussian_array(&[3, 1, 4, 4], 1.0, &mut rng);
        let xa = crate::nn::gaussian_array(&[3, 1, 4, 4], 1.0, &mut rng);

        // Independent blurred MSE.
        let by = blur_values(&ya, 3);
        let bx = blur_values(&xa, 3);
        let mse = by.iter().zip(&bx).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / by.len() as f64;
        let nll = flow.nll_values(&xa).unwrap();
        let prior = nll.iter().sum::<f64>() / 3.0 / 16.0;

        let tape = Tape::new();
        let (y, x) = (tape.constant(&ya), tape.constant(&xa));
        let zero = DenoiseLossConfig { lambda: 0.0, ..Default::default() };
        assert!((denoise_loss(&zero, y, x, &flow).unwrap().total.item() - mse).abs() < 1e-15);

        let cfg = DenoiseLossConfig::default();
        assert_eq!(cfg.lambda, 1.5e-6);
        assert_eq!(cfg.blur_kernel, 3);
        let loss = denoise_loss(&cfg, y, x, &flow).unwrap();
        assert!((loss.fidelity.item() - mse).abs() < 1e-15);
        assert!((loss.prior.unwrap().item() - prior).abs() < 1e-12);
        assert!((loss.total.item() - (mse + 1.5e-6 * prior)).abs() < 1e-15);
    }

    #[test]
    fn prior_requires_matching_patch_size() {
        let flow = tiny_flow();
        let tape = Tape::new();
        let y = tape.constant(&DiffArray::zeros([1, 1, 6, 6]));
        assert!(denoise_loss(&DenoiseLossConfig::default(), y, y, &flow).is_err());
        let zero = DenoiseLossConfig { lambda: 0.0, ..Default::default() };
        assert!(denoise_loss(&zero, y, y, &flow).is_ok());
        let other = tape.constant(&DiffArray::zeros([1, 1, 6, 5]));
        assert!(matches!(denoise_loss(&zero, y, other, &flow), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn invalid_loss_config() {
        let bad = DenoiseLossConfig { lambda: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiseLossConfig { blur_kernel: 4, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
