//! PSNR, full-image denoising and noise-level sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{add_noise_with_sigma, denormalize, normalize, ImageBuffer, NormRecord};
use crate::denoiser::{DenoiserNet, MIN_SPATIAL};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::tensor::DiffArray;

fn psnr_from_mse(mse: f64, max: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max * max / mse).log10()
    }
}

/// PSNR on the 8-bit scale. Identical images give `+inf`.
pub fn psnr(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64> {
    let dims = |i: &ImageBuffer| vec![i.height(), i.width(), i.channels()];
    if dims(reference) != dims(test) {
        return Err(Error::ShapeMismatch { op: "psnr", lhs: dims(reference), rhs: dims(test) });
    }
    let se: f64 = reference.data().iter().zip(test.data()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
    Ok(psnr_from_mse(se / reference.data().len() as f64, 255.0))
}

/// PSNR of normalized arrays, peak value 1.
pub fn psnr_arrays(reference: &DiffArray, test: &DiffArray) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::ShapeMismatch { op: "psnr", lhs: reference.shape().to_vec(), rhs: test.shape().to_vec() });
    }
    let se: f64 = reference.data().iter().zip(test.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(psnr_from_mse(se / reference.numel() as f64, 1.0))
}

/// Whole image through the network in one pass, then clamped and quantized.
pub fn denoise_image(net: &DenoiserNet, image: &ImageBuffer) -> Result<ImageBuffer> {
    if image.width() < MIN_SPATIAL || image.height() < MIN_SPATIAL {
        return Err(Error::InvalidShape {
            op: "denoise_image",
            shape: vec![image.height(), image.width()],
            reason: format!("images must be at least {MIN_SPATIAL}x{MIN_SPATIAL}"),
        });
    }
    denoise_array(net, &normalize(image))
}

fn denoise_array(net: &DenoiserNet, x: &DiffArray) -> Result<ImageBuffer> {
    denormalize(&net.denoise(x)?, NormRecord::default())
}

/// Noise stream seed for one sigma; recorded in the report.
pub fn sigma_seed(seed: u64, sigma: f64) -> u64 {
    let mut z = seed ^ sigma.to_bits().rotate_left(17);
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The 8-bit noisy version of `image` used by the evaluation suite.
pub fn noisy_image(image: &ImageBuffer, sigma: f64, seed: u64, index: usize) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let y = add_noise_with_sigma(&normalize(image), sigma, &mut rng)?;
    denormalize(&y, NormRecord::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub path: PathBuf,
    pub sigma: f64,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub seed: u64,
    pub count: usize,
    pub mean_noisy: f64,
    pub std_noisy: f64,
    pub mean_denoised: f64,
    pub std_denoised: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<SigmaSummary>,
    pub runtime_secs: f64,
    pub config: String,
}

/// Mean and population standard deviation. Infinite entries make the mean
/// infinite; the spread is then zero if all are infinite and NaN otherwise.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.iter().all(|v| v.is_infinite()) && !values.is_empty() {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Noises every image at every sigma, denoises it and records both PSNRs.
/// Rows are sorted by `(path, sigma)`.
pub fn evaluate_suite(
    net: &DenoiserNet,
    images: &[(PathBuf, ImageBuffer)],
    sigmas: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set has no images".into()));
    }
    if sigmas.is_empty() {
        return Err(Error::Empty("no noise levels given".into()));
    }
    let start = Instant::now();
    let jobs: Vec<(usize, usize)> = (0..sigmas.len()).flat_map(|s| (0..images.len()).map(move |i| (s, i))).collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(s, i)| {
            let sigma = sigmas[s];
            let (path, clean) = &images[i];
            let noisy = noisy_image(clean, sigma, sigma_seed(seed, sigma), i)?;
            let denoised = denoise_image(net, &noisy)?;
            Ok(EvalRow {
                path: path.clone(),
                sigma,
                psnr_noisy: psnr(clean, &noisy)?,
                psnr_denoised: psnr(clean, &denoised)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.path.cmp(&b.path).then(a.sigma.total_cmp(&b.sigma)));
    let summaries = summarize(&rows, sigmas, seed);
    Ok(EvalReport {
        rows,
        summaries,
        runtime_secs: start.elapsed().as_secs_f64(),
        config: format!("seed = {seed}\nsigmas = {sigmas:?}\n"),
    })
}

pub fn summarize(rows: &[EvalRow], sigmas: &[f64], seed: u64) -> Vec<SigmaSummary> {
    let mut uniq: Vec<f64> = sigmas.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    uniq.into_iter()
        .map(|sigma| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.sigma == sigma).collect();
            let noisy: Vec<f64> = sel.iter().map(|r| r.psnr_noisy).collect();
            let den: Vec<f64> = sel.iter().map(|r| r.psnr_denoised).collect();
            let (mean_noisy, std_noisy) = mean_std(&noisy);
            let (mean_denoised, std_denoised) = mean_std(&den);
            SigmaSummary {
                sigma,
                seed: sigma_seed(seed, sigma),
                count: sel.len(),
                mean_noisy,
                std_noisy,
                mean_denoised,
                std_denoised,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("path,sigma,psnr_noisy,psnr_denoised\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.path.display(), r.sigma, r.psnr_noisy, r.psnr_denoised);
        }
        s
    }

    /// Per-sigma aggregates; contains nothing run-dependent such as timing.
    pub fn table(&self) -> String {
        let mut s =
            format!("{:>6}  {:>20}  {:>6}  {:>14}  {:>14}\n", "sigma", "seed", "images", "noisy (dB)", "denoised (dB)");
        for a in &self.summaries {
            let _ = writeln!(
                s,
                "{:>6}  {:>20}  {:>6}  {:>7.2} ±{:>5.2}  {:>7.2} ±{:>5.2}",
                a.sigma, a.seed, a.count, a.mean_noisy, a.std_noisy, a.mean_denoised, a.std_denoised
            );
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in
            [("report.csv", self.csv()), ("summary.txt", self.table()), ("config.toml", self.config.clone())]
        {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Mean NLL per dimension of each non-overlapping patch-sized tile.
/// Returns `(mean over tiles, tile count)`.
pub fn score_image(flow: &FlowModel, image: &ImageBuffer) -> Result<(f64, usize)> {
    let spec = flow.input_spec();
    let p = spec.height;
    if image.channels() != spec.channels || image.width() < p || image.height() < p {
        return Err(Error::InvalidShape {
            op: "score",
            shape: vec![image.height(), image.width(), image.channels()],
            reason: format!("need at least one {p}x{p} tile with {} channel(s)", spec.channels),
        });
    }
    let (tx, ty) = (image.width() / p, image.height() / p);
    let c = spec.channels;
    let mut tiles = Vec::with_capacity(tx * ty * c * p * p);
    for j in 0..ty {
        for i in 0..tx {
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        tiles.push(f64::from(image.get(i * p + x, j * p + y, ch)) / 255.0);
                    }
                }
            }
        }
    }
    let n = tx * ty;
    let nll = flow.nll_values(&DiffArray::new([n, c, p, p], tiles)?)?;
    Ok((nll.iter().sum::<f64>() / n as f64 / spec.numel() as f64, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserArch;

    fn gray(w: usize, h: usize, data: Vec<u8>) -> ImageBuffer {
        ImageBuffer::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let a = gray(4, 4, vec![0; 16]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &gray(4, 4, vec![255; 16])).unwrap(), 0.0);
        let xa = DiffArray::full([1, 1, 2, 2], 0.5);
        let xb = DiffArray::full([1, 1, 2, 2], 0.6);
        assert!((psnr_arrays(&xa, &xb).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &gray(2, 8, vec![0; 16])).is_err());
    }

    #[test]
    fn symmetric() {
        let a = gray(3, 3, (0..9).map(|v| v * 20).collect());
        let b = gray(3, 3, (0..9).map(|v| v * 21 + 3).collect());
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn denoise_keeps_dimensions_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = DenoiserArch { channels: 1, features: 4, blocks: 1 };
        let net = DenoiserNet::new(arch, &mut rng);
        let img = gray(13, 10, (0..130).map(|v| (v * 2) as u8).collect());
        let out = denoise_image(&net, &img).unwrap();
        assert_eq!(out, img, "zero-initialised output layer");
        assert_eq!(denoise_image(&net, &img).unwrap(), out);
        assert!(denoise_image(&net, &gray(8, 20, vec![0; 160])).is_err());
    }

    #[test]
    fn aggregates_match_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = DenoiserArch { channels: 1, features: 2, blocks: 1 };
        let net = DenoiserNet::new(arch, &mut rng);
        let imgs: Vec<(PathBuf, ImageBuffer)> = crate::data::synth::smooth_corpus(3, 16, 16, 2)
            .into_iter()
            .enumerate()
            .map(|(i, im)| (PathBuf::from(format!("z{i}.pgm")), im))
            .collect();
        let rep = evaluate_suite(&net, &imgs, &[25.0, 0.0], 4).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.rows[0].sigma, 0.0);
        assert_eq!(rep.rows[0].psnr_noisy, f64::INFINITY);
        let s25 = &rep.summaries[1];
        let vals: Vec<f64> = rep.rows.iter().filter(|r| r.sigma == 25.0).map(|r| r.psnr_noisy).collect();
        assert_eq!(s25.mean_noisy, vals.iter().sum::<f64>() / 3.0);
        let again = evaluate_suite(&net, &imgs, &[25.0, 0.0], 4).unwrap();
        assert_eq!(again.csv(), rep.csv());
        assert_eq!(again.table(), rep.table());
        assert!(evaluate_suite(&net, &[], &[25.0], 0).is_err());
    }
}
