//! Gradient oracle cases: reverse-mode gradients against central
//! differences, shared by the gradient tests and the acceptance runner.

use flowprior::denoiser::{denoise_loss, DenoiseLossConfig, DenoiserArch, DenoiserNet, PriorReduction};
use flowprior::nn::{ParamMode, Parameterized};
use flowprior::tensor::{DiffArray, Padding, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const SEEDS: u64 = 10;

/// Contracts a tensor-valued result with fixed random weights so every
/// output element reaches the scalar loss.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> flowprior::Result<Var<'t>> {
    let w = gaussian(&y.shape(), 1.0, &mut rng(seed ^ 0xABCD));
    y.mul(&tape.constant(&w)).map(|v| v.sum_all())
}

/// Worst relative error per named case, over every seed.
#[derive(Debug, Default)]
pub struct Suite {
    pub cases: Vec<(String, f64)>,
}

impl Suite {
    pub fn record(&mut self, name: &str, err: f64) {
        match self.cases.iter_mut().find(|(n, _)| n == name) {
            Some((_, worst)) => *worst = worst.max(err),
            None => self.cases.push((name.to_owned(), err)),
        }
    }

    pub fn check(&mut self, name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<DiffArray>, f: &TapeFn<'_>) {
        for seed in 0..SEEDS {
            let xs = inputs(&mut rng(seed));
            self.record(name, grad_check(&xs, f));
        }
    }

    pub fn failures(&self) -> Vec<String> {
        self.cases.iter().filter(|(_, e)| !(*e < GRAD_TOL)).map(|(n, e)| format!("{n}: {e:e}")).collect()
    }
}

/// Every differentiable op and both composite losses.
pub fn full_suite() -> Suite {
    let mut s = Suite::default();
    binary_ops(&mut s);
    unary_ops(&mut s);
    matmul_and_log_abs_det(&mut s);
    conv2d_all_paddings(&mut s);
    reductions_and_layout_ops(&mut s);
    flow_nll(&mut s);
    denoise_loss_wrt_parameters(&mut s);
    denoise_loss_wrt_input(&mut s);
    s
}

pub fn binary_ops(s: &mut Suite) {
    let two = |r: &mut ChaCha8Rng| vec![gaussian(&[2, 3, 4], 1.0, r), gaussian(&[2, 3, 4], 1.0, r)];
    s.check("add", two, &|t, v| weighted(t, v[0].add(&v[1])?, 1));
    s.check("sub", two, &|t, v| weighted(t, v[0].sub(&v[1])?, 2));
    s.check("mul", two, &|t, v| weighted(t, v[0].mul(&v[1])?, 3));
    let scalar = |r: &mut ChaCha8Rng| vec![gaussian(&[3, 5], 1.0, r), gaussian(&[1], 1.0, r)];
    s.check("mul scalar broadcast", scalar, &|t, v| weighted(t, v[0].mul(&v[1])?, 4));
    s.check("add scalar broadcast", scalar, &|t, v| weighted(t, v[0].add(&v[1])?, 5));
    let chan = |r: &mut ChaCha8Rng| vec![gaussian(&[2, 3, 2, 2], 1.0, r), gaussian(&[3], 1.0, r)];
    s.check("mul channel broadcast", chan, &|t, v| weighted(t, v[0].mul(&v[1])?, 6));
    s.check("add channel broadcast", chan, &|t, v| weighted(t, v[0].add(&v[1])?, 7));
}

pub fn unary_ops(s: &mut Suite) {
    let one = |r: &mut ChaCha8Rng| vec![gaussian(&[3, 4], 1.0, r)];
    s.check("add_scalar", one, &|t, v| weighted(t, v[0].add_scalar(0.7), 1));
    s.check("mul_scalar", one, &|t, v| weighted(t, v[0].mul_scalar(-1.3), 2));
    s.check("square", one, &|t, v| weighted(t, v[0].square(), 3));
    s.check("exp", one, &|t, v| weighted(t, v[0].exp()?, 4));
    s.check("relu", one, &|t, v| weighted(t, v[0].relu(), 5));
    let positive = |r: &mut ChaCha8Rng| vec![uniform(&[3, 4], 0.2, 3.0, r)];
    s.check("ln", positive, &|t, v| weighted(t, v[0].ln()?, 6));
}

pub fn matmul_and_log_abs_det(s: &mut Suite) {
    s.check("matmul", |r| vec![gaussian(&[3, 4], 1.0, r), gaussian(&[4, 2], 1.0, r)], &|t, v| {
        weighted(t, v[0].matmul(&v[1])?, 1)
    });
    s.check(
        "log_abs_det",
        |r| {
            let n = r.random_range(2..=5);
            let mut a = gaussian(&[n, n], 0.4, r);
            for i in 0..n {
                a.data_mut()[i * n + i] += if i % 2 == 0 { 2.0 } else { -2.0 };
            }
            vec![a]
        },
        &|_, v| v[0].log_abs_det(),
    );
}

pub fn conv2d_all_paddings(s: &mut Suite) {
    for (padding, k) in [(Padding::SameZero, 3), (Padding::SameReflect, 3), (Padding::Valid, 3), (Padding::SameZero, 1)]
    {
        s.check(
            &format!("conv2d {padding:?} k{k}"),
            |r| vec![gaussian(&[2, 3, 5, 4], 1.0, r), gaussian(&[2, 3, k, k], 0.5, r)],
            &move |t, v| weighted(t, v[0].conv2d(&v[1], padding)?, 11),
        );
    }
}

pub fn reductions_and_layout_ops(s: &mut Suite) {
    let x = |r: &mut ChaCha8Rng| vec![gaussian(&[2, 4, 4, 2], 1.0, r)];
    s.check("sum axes", x, &|t, v| weighted(t, v[0].sum(&[1, 3])?, 1));
    s.check("mean axes", x, &|t, v| weighted(t, v[0].mean(&[0, 2])?, 2));
    s.check("sum_all", x, &|_, v| Ok(v[0].square().sum_all()));
    s.check("mean_all", x, &|_, v| Ok(v[0].square().mean_all()));
    s.check("reshape", x, &|t, v| weighted(t, v[0].reshape([8, 8])?.square(), 3));
    s.check("channel_split", x, &|t, v| {
        let (a, b) = v[0].channel_split()?;
        weighted(t, a.mul(&b)?, 4)
    });
    s.check("channel_concat", |r| vec![gaussian(&[2, 2, 3, 3], 1.0, r), gaussian(&[2, 2, 3, 3], 1.0, r)], &|t, v| {
        weighted(t, v[0].channel_concat(&v[1])?.square(), 5)
    });
    s.check("squeeze2x2", x, &|t, v| weighted(t, v[0].squeeze2x2()?, 6));
    s.check("unsqueeze2x2", |r| vec![gaussian(&[2, 8, 2, 3], 1.0, r)], &|t, v| weighted(t, v[0].unsqueeze2x2()?, 7));
}

pub fn flow_nll(s: &mut Suite) {
    for seed in 0..SEEDS {
        let mut model = random_flow(seed);
        let spec = model.input_spec();
        let x = gaussian(&[2, spec.channels, spec.height, spec.width], 0.5, &mut rng(seed + 100));

        let err = grad_check(std::slice::from_ref(&x), &|t, v| {
            let (nll, _) = model.nll(t, v[0], ParamMode::Frozen)?;
            Ok(nll.sum_all())
        });
        s.record("flow nll wrt input", err);

        let xa = x.clone();
        let err = param_grad_check(
            &mut model,
            &|m| {
                let tape = Tape::new();
                let (nll, fwd) = m.nll(&tape, tape.constant(&xa), ParamMode::Trainable).unwrap();
                let grads = tape.backward(nll.mean_all()).unwrap();
                fwd.bindings.accumulate_grads(&grads, m).unwrap();
            },
            &|m| m.nll_values(&x).unwrap().iter().sum::<f64>() / 2.0,
        );
        s.record("flow nll wrt parameters", err);
    }
}

fn small_denoiser(seed: u64) -> DenoiserNet {
    let mut r = rng(seed);
    let arch = DenoiserArch { channels: 1, features: 3, blocks: 1 };
    let mut net = DenoiserNet::new(arch, &mut r);
    // Move the zero-initialised output layer so every path carries gradient.
    for (_, p) in net.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.2 * r.random_range(-1.0..1.0);
        }
    }
    net
}

pub fn denoise_loss_wrt_parameters(s: &mut Suite) {
    for seed in 0..SEEDS {
        let flow = loop_flow(seed);
        let spec = flow.input_spec();
        let y = uniform(&[2, 1, spec.height.max(9), spec.width.max(9)], 0.0, 1.0, &mut rng(seed + 7));
        let prior = if seed % 2 == 0 { PriorReduction::PerDim } else { PriorReduction::PerItem };
        let cfg = DenoiseLossConfig { lambda: 0.05, prior, ..Default::default() };
        let mut net = small_denoiser(seed);
        let ya = y.clone();
        let err = param_grad_check(
            &mut net,
            &|n| {
                let tape = Tape::new();
                let yv = tape.constant(&ya);
                let (xh, b) = n.forward(&tape, yv, ParamMode::Trainable).unwrap();
                let loss = denoise_loss(&cfg, yv, xh, &flow).unwrap();
                let grads = tape.backward(loss.total).unwrap();
                b.accumulate_grads(&grads, n).unwrap();
            },
            &|n| {
                let tape = Tape::new();
                let yv = tape.constant(&y);
                let (xh, _) = n.forward(&tape, yv, ParamMode::Frozen).unwrap();
                denoise_loss(&cfg, yv, xh, &flow).unwrap().total.item()
            },
        );
        s.record("denoise loss wrt denoiser parameters", err);
    }
}

/// A random 1-channel flow over 12x12 patches, large enough for the denoiser.
pub fn loop_flow(seed: u64) -> flowprior::flow::FlowModel {
    let mut r = rng(seed + 55);
    let arch = flowprior::flow::FlowArch { channels: 1, patch_size: 12, levels: 1, steps_per_level: 1, hidden: 3 };
    let mut m = flowprior::flow::FlowModel::new(arch, &mut r).unwrap();
    m.initialize(&uniform(&[4, 1, 12, 12], 0.0, 1.0, &mut r)).unwrap();
    for (name, p) in m.parameters_mut() {
        if name.contains("conv3") {
            for v in p.data_mut() {
                *v = 0.2 * r.random_range(-1.0..1.0);
            }
        }
    }
    m
}

pub fn denoise_loss_wrt_input(s: &mut Suite) {
    for seed in 0..SEEDS {
        let flow = loop_flow(seed);
        let cfg = DenoiseLossConfig { lambda: 0.1, ..Default::default() };
        let xs = {
            let mut r = rng(seed);
            vec![uniform(&[2, 1, 12, 12], 0.0, 1.0, &mut r), uniform(&[2, 1, 12, 12], 0.0, 1.0, &mut r)]
        };
        let err = grad_check(&xs, &|_, v| Ok(denoise_loss(&cfg, v[0], v[1], &flow)?.total));
        s.record("denoise loss wrt (y, x_hat)", err);
    }
}
