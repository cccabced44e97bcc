//! Independent reference computations shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

pub mod grads;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowprior::data::synth::smooth_corpus;
use flowprior::flow::{FlowArch, FlowModel};
use flowprior::nn::Parameterized;
use flowprior::tensor::{DiffArray, Tape, Var};
use flowprior::training::Corpus;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> DiffArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    DiffArray::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> DiffArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DiffArray::new(shape.to_vec(), data).unwrap()
}

/// Elementwise `|a - n| / max(|a|, |n|, floor)`, where the floor is a
/// thousandth of the largest numeric entry so that entries negligible at
/// the gradient's own scale are compared at that scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Central differences of a scalar function of several arrays.
pub fn numeric_grads(inputs: &[DiffArray], f: &dyn Fn(&[DiffArray]) -> f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].numel())
                .map(|j| {
                    let orig = work[i].data()[j];
                    work[i].data_mut()[j] = orig + FD_STEP;
                    let fp = f(&work);
                    work[i].data_mut()[j] = orig - FD_STEP;
                    let fm = f(&work);
                    work[i].data_mut()[j] = orig;
                    (fp - fm) / (2.0 * FD_STEP)
                })
                .collect()
        })
        .collect()
}

/// A scalar-valued tape computation of its inputs.
pub type TapeFn<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> flowprior::Result<Var<'t>> + 'a;

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every input.
pub fn grad_check(inputs: &[DiffArray], f: &TapeFn<'_>) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<DiffArray> = inputs.iter().map(|a| a.clone().with_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a)).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v).unwrap().to_vec()).collect();

    let value = |xs: &[DiffArray]| {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.constant(a)).collect();
        f(&t, &vs).unwrap().item()
    };
    let numeric = numeric_grads(inputs, &value);
    analytic.iter().zip(&numeric).map(|(a, n)| max_rel_err(a, n)).fold(0.0, f64::max)
}

/// Worst relative error between the parameter gradients recorded by
/// `analytic` (which must leave them in each array's grad buffer) and
/// central differences of `value` over every parameter element.
pub fn param_grad_check<M: Parameterized>(model: &mut M, analytic: &dyn Fn(&mut M), value: &dyn Fn(&M) -> f64) -> f64 {
    model.zero_grad();
    analytic(model);
    let grads: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|(_, p)| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            let set = |m: &mut M, v: f64| m.parameters_mut()[k].1.data_mut()[j] = v;
            let orig = model.parameters()[k].1.data()[j];
            set(model, orig + FD_STEP);
            let fp = value(model);
            set(model, orig - FD_STEP);
            let fm = value(model);
            set(model, orig);
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        worst = worst.max(max_rel_err(g, &numeric));
    }
    worst
}

/// Jacobian of `x -> z` at a single input, one reverse pass per output.
pub fn tape_jacobian(model: &FlowModel, x: &DiffArray) -> DMatrix<f64> {
    let d = x.numel();
    let tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let fwd = model.forward(&tape, xv, flowprior::nn::ParamMode::Frozen).unwrap();
    let z = fwd.z;
    let mut jac = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let ek = tape.constant_from(z.shape(), e).unwrap();
        let g = tape.backward(z.mul(&ek).unwrap().sum_all()).unwrap();
        for (j, v) in g.wrt(xv).unwrap().iter().enumerate() {
            jac[(k, j)] = *v;
        }
    }
    jac
}

/// Jacobian by central differences of the forward map.
pub fn fd_jacobian(model: &FlowModel, x: &DiffArray) -> DMatrix<f64> {
    let d = x.numel();
    let forward = |x: &DiffArray| {
        let tape = Tape::new();
        model.forward(&tape, tape.constant(x), flowprior::nn::ParamMode::Frozen).unwrap().z.value()
    };
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.clone();
    for j in 0..d {
        let orig = x.data()[j];
        xp.data_mut()[j] = orig + FD_STEP;
        let fp = forward(&xp);
        xp.data_mut()[j] = orig - FD_STEP;
        let fm = forward(&xp);
        xp.data_mut()[j] = orig;
        for k in 0..d {
            jac[(k, j)] = (fp[k] - fm[k]) / (2.0 * FD_STEP);
        }
    }
    jac
}

pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().abs().ln()
}

/// Small flow shapes whose input has at most 48 elements.
pub const SMALL_INPUTS: [(usize, usize, usize); 4] = [(1, 4, 1), (2, 4, 1), (3, 4, 1), (1, 4, 2)];

/// A flow with every parameter moved away from its identity-like
/// initialisation: actnorm scales of both signs, non-orthogonal 1x1
/// matrices and non-zero coupling outputs.
pub fn random_flow(seed: u64) -> FlowModel {
    let mut r = rng(seed);
    let (channels, patch_size, levels) = SMALL_INPUTS[r.random_range(0..SMALL_INPUTS.len())];
    let arch = FlowArch {
        channels,
        patch_size,
        levels,
        steps_per_level: r.random_range(1..=2),
        hidden: r.random_range(2..=6),
    };
    let mut model = FlowModel::new(arch, &mut r).unwrap();
    let probe = gaussian(&[4, channels, patch_size, patch_size], 1.0, &mut r);
    model.initialize(&probe).unwrap();
    for (name, p) in model.parameters_mut() {
        let n = p.numel();
        if name.ends_with(".scale") {
            for v in p.data_mut() {
                let mag = r.random_range(0.5..2.0);
                *v = if r.random_bool(0.3) { -mag } else { mag };
            }
        } else if p.shape().len() == 2 {
            for v in p.data_mut() {
                *v += 0.3 * r.sample::<f64, _>(StandardNormal);
            }
        } else {
            let std = 0.4 / (n as f64).sqrt().max(1.0) + 0.1;
            for v in p.data_mut() {
                *v = std * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    model
}

/// Hand-stepped scalar Adam on `f(theta) = (theta - 3)^2`, written out
/// independently of the library optimizer.
pub fn adam_reference(steps: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut trace = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = 2.0 * (theta - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        theta -= lr * mhat / (vhat.sqrt() + eps);
        trace.push(theta);
    }
    trace
}

/// Lag-1 sample autocorrelation along rows (`axis = 1`) or columns (`axis = 0`).
pub fn lag1_autocorr(values: &[f64], height: usize, width: usize, axis: usize) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let mut cov = 0.0;
    for y in 0..height {
        for x in 0..width {
            let (ny, nx) = if axis == 1 { (y, x + 1) } else { (y + 1, x) };
            if ny < height && nx < width {
                cov += (values[y * width + x] - mean) * (values[ny * width + nx] - mean);
            }
        }
    }
    cov / var
}

/// In-memory synthetic corpus with distinct fake paths.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64, tag: &str) -> Corpus {
    Corpus {
        paths: (0..count).map(|i| PathBuf::from(format!("/synthetic/{tag}/{i:04}.pgm"))).collect(),
        images: smooth_corpus(count, size, size, seed),
    }
}

/// Runs the command-line binary in `dir`.
pub fn flowprior(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowprior"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("FLOWPRIOR_THREADS", "1")
        .output()
        .expect("binary runs")
}

/// One small invocation of every subcommand, in order.
pub const PIPELINE: &[&[&str]] = &[
    &["prepare", "--synthetic", "24", "--size", "24", "--seed", "3", "--out", "data"],
    &[
        "train-prior",
        "--manifest",
        "data/clean.txt",
        "--out",
        "prior",
        "--epochs",
        "2",
        "--seed",
        "7",
        "--patch-size",
        "12",
        "--flow-levels",
        "1",
        "--flow-steps",
        "1",
        "--flow-hidden",
        "8",
        "--batch-size",
        "16",
        "--patches-per-image",
        "2",
        "--checkpoint-every",
        "1",
    ],
    &[
        "train-denoiser",
        "--manifest",
        "data/noisy.txt",
        "--checkpoint",
        "prior/prior_final.ck",
        "--validation",
        "data/validation.txt",
        "--out",
        "den",
        "--epochs",
        "2",
        "--seed",
        "7",
        "--patch-size",
        "12",
        "--features",
        "4",
        "--blocks",
        "1",
        "--batch-size",
        "16",
        "--patches-per-image",
        "2",
    ],
    &["denoise", "--checkpoint", "den/denoiser_final.ck", "--in", "data/images/img_00000.pgm", "--out", "out.png"],
    &[
        "evaluate",
        "--checkpoint",
        "den/denoiser_final.ck",
        "--manifest",
        "data/validation.txt",
        "--sigmas",
        "15,25,35",
        "--out",
        "eval",
    ],
    &["score", "--checkpoint", "prior/prior_final.ck", "--manifest", "data/validation.txt", "--out", "score.csv"],
];

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, at: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(at).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Runs [`PIPELINE`] in `dir`, returning each step's stdout, or the first
/// failing step's stderr.
pub fn run_pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let mut stdouts = Vec::new();
    for args in PIPELINE {
        let out = flowprior(dir, args);
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
        stdouts.push(out.stdout);
    }
    Ok(stdouts)
}
