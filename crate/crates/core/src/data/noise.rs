use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DiffArray;

/// Noise standard deviation range on the 0-255 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma_min: 0.0, sigma_max: 50.0 }
    }
}

impl NoiseSpec {
    pub fn fixed(sigma: f64) -> Self {
        Self { sigma_min: sigma, sigma_max: sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= sigma_min <= sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn sample_sigma(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma_min == self.sigma_max {
            self.sigma_min
        } else {
            rng.random_range(self.sigma_min..=self.sigma_max)
        }
    }
}

/// Adds white Gaussian noise to each item of a normalized `N x ...` batch.
/// Every item gets its own sigma; the returned sigmas are on the 0-255 scale.
/// Values are not clamped.
pub fn add_gaussian_noise(x: &DiffArray, spec: NoiseSpec, rng: &mut impl Rng) -> Result<(DiffArray, Vec<f64>)> {
    spec.validate()?;
    let n = x.shape().first().copied().unwrap_or(1);
    let per_item = x.numel() / n;
    let mut out = x.data().to_vec();
    let mut sigmas = Vec::with_capacity(n);
    for item in out.chunks_mut(per_item) {
        let sigma = spec.sample_sigma(rng);
        add_noise_slice(item, sigma / 255.0, rng);
        sigmas.push(sigma);
    }
    Ok((DiffArray::new(x.shape().to_vec(), out)?, sigmas))
}

/// Adds noise with one fixed sigma (0-255 scale) to every element.
pub fn add_noise_with_sigma(x: &DiffArray, sigma: f64, rng: &mut impl Rng) -> Result<DiffArray> {
    NoiseSpec::fixed(sigma).validate()?;
    let mut out = x.data().to_vec();
    add_noise_slice(&mut out, sigma / 255.0, rng);
    DiffArray::new(x.shape().to_vec(), out)
}

fn add_noise_slice(values: &mut [f64], std: f64, rng: &mut impl Rng) {
    if std == 0.0 {
        return;
    }
    for v in values {
        let z: f64 = rng.sample(StandardNormal);
        *v += std * z;
    }
}
