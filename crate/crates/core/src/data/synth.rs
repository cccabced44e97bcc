//! Synthetic grayscale corpus: smooth gradients plus Gaussian bumps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageBuffer;

pub fn smooth_image(width: usize, height: usize, rng: &mut impl Rng) -> ImageBuffer {
    let base = rng.random_range(80.0..170.0);
    let gx = rng.random_range(-60.0..60.0) / width as f64;
    let gy = rng.random_range(-60.0..60.0) / height as f64;
    let scale = width.min(height) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=5))
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(scale / 8.0..scale / 3.0),
                rng.random_range(-70.0..70.0),
            )
        })
        .collect();
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base + gx * (xf - cx) + gy * (yf - cy);
            for &(bx, by, r, amp) in &blobs {
                let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                v += amp * (-d2 / (2.0 * r * r)).exp();
            }
            data.push(v.round().clamp(20.0, 235.0) as u8);
        }
    }
    ImageBuffer::new(width, height, 1, data).expect("valid dimensions")
}

/// `count` images; image `i` depends only on `(seed, i)`.
pub fn smooth_corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<ImageBuffer> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            smooth_image(width, height, &mut rng)
        })
        .collect()
}
