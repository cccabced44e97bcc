use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize, ImageBuffer, NormRecord};
use crate::error::{Error, Result};
use crate::tensor::DiffArray;

/// Normalized `N x C x P x P` patches and where each one came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub data: DiffArray,
    pub record: NormRecord,
    /// `(image index, x, y)` of each patch's top-left corner.
    pub positions: Vec<(usize, usize, usize)>,
}

pub fn extract_patches(images: &[ImageBuffer], count: usize, patch: usize, seed: u64) -> Result<PatchBatch> {
    extract_patches_with(images, count, patch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Picks `count` patches: an image uniformly among those large enough, then
/// a uniform top-left corner inside it.
pub fn extract_patches_with(
    images: &[ImageBuffer],
    count: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    let arrays: Vec<DiffArray> = images.iter().map(normalize).collect();
    extract_patches_from_arrays(&arrays, count, patch, rng)
}

/// Same sampling as [`extract_patches_with`] on `[1, C, H, W]` arrays.
pub fn extract_patches_from_arrays(
    images: &[DiffArray],
    count: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    if count == 0 || patch == 0 {
        return Err(Error::Config("patch count and size must be positive".into()));
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape().len() != 4 || img.shape()[0] != 1 {
            return Err(Error::InvalidShape {
                op: "extract_patches",
                shape: img.shape().to_vec(),
                reason: format!("image {i} is not a single 1 x C x H x W array"),
            });
        }
    }
    let dims = |img: &DiffArray| (img.shape()[1], img.shape()[2], img.shape()[3]);
    let eligible: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(i, img)| {
            let (_, h, w) = dims(img);
            let ok = w >= patch && h >= patch;
            if !ok {
                log::warn!("skipping image {i}: {w}x{h} is smaller than patch {patch}");
            }
            ok
        })
        .map(|(i, _)| i)
        .collect();
    let Some(&first) = eligible.first() else {
        return Err(Error::Empty(format!("no image is at least {patch}x{patch}")));
    };
    let c = dims(&images[first]).0;
    if let Some(&bad) = eligible.iter().find(|&&i| dims(&images[i]).0 != c) {
        return Err(Error::Config(format!(
            "mixed channel counts: image {first} has {c}, image {bad} has {}",
            dims(&images[bad]).0
        )));
    }

    let pp = patch * patch;
    let mut out = vec![0.0; count * c * pp];
    let mut positions = Vec::with_capacity(count);
    for dst in out.chunks_mut(c * pp) {
        let idx = eligible[rng.random_range(0..eligible.len())];
        let (_, h, w) = dims(&images[idx]);
        let src = images[idx].data();
        let x0 = rng.random_range(0..=w - patch);
        let y0 = rng.random_range(0..=h - patch);
        for ch in 0..c {
            for dy in 0..patch {
                let row = (ch * h + y0 + dy) * w + x0;
                dst[ch * pp + dy * patch..ch * pp + (dy + 1) * patch].copy_from_slice(&src[row..row + patch]);
            }
        }
        positions.push((idx, x0, y0));
    }
    Ok(PatchBatch { data: DiffArray::new([count, c, patch, patch], out)?, record: NormRecord::default(), positions })
}
