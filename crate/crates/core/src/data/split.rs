use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub clean: Vec<PathBuf>,
    pub noisy: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
}

/// Shuffles `paths` and cuts it into clean / noisy / validation subsets.
/// The first two sizes are `round(n * fraction)`; validation takes the rest.
pub fn split_dataset(paths: &[PathBuf], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    if paths.is_empty() {
        return Err(Error::Empty("no images to split".into()));
    }
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be in [0, 1] and sum to 1, got ({a}, {b}, {c})")));
    }
    let mut unique = HashSet::new();
    if let Some(dup) = paths.iter().find(|p| !unique.insert(*p)) {
        return Err(Error::ManifestOverlap { count: paths.len() - unique.len(), example: dup.clone() });
    }
    let mut shuffled = paths.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_clean = ((n as f64 * a).round() as usize).min(n);
    let n_noisy = ((n as f64 * b).round() as usize).min(n - n_clean);
    let validation = shuffled.split_off(n_clean + n_noisy);
    let noisy = shuffled.split_off(n_clean);
    Ok(DatasetSplit { clean: shuffled, noisy, validation })
}
