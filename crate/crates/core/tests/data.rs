mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use common::{lag1_autocorr, rng};
use flowprior::data::synth::smooth_corpus;
use flowprior::data::{
    add_gaussian_noise, add_noise_with_sigma, check_disjoint, denormalize, extract_patches, load_image, normalize,
    read_manifest, save_image, split_dataset, write_manifest, ImageBuffer, NoiseSpec, NormRecord,
};
use flowprior::tensor::DiffArray;
use proptest::prelude::*;

fn image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
    use rand::Rng;
    let mut r = rng(seed);
    ImageBuffer::new(w, h, c, (0..w * h * c).map(|_| r.random()).collect()).unwrap()
}

#[test]
fn pgm_with_known_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.pgm");
    let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 64, 128, 255]);
    std::fs::write(&path, &bytes).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
    assert_eq!(img.data(), &[0, 64, 128, 255]);
    assert_eq!(img.get(1, 0, 0), 64);

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_image(&path).is_err());
    std::fs::write(&path, b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
    assert!(load_image(&path).is_err());
    assert!(load_image(dir.path().join("missing.pgm")).is_err());
}

#[test]
fn save_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for (name, c) in [("g.pgm", 1), ("g.png", 1), ("rgb.png", 3)] {
        let img = image(13, 7, c, c as u64);
        let path = dir.path().join(name);
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img, "{name}");
    }
    assert!(save_image(&image(4, 4, 3, 0), dir.path().join("rgb.pgm")).is_err());
}

#[test]
fn truncated_png_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.png");
    save_image(&image(16, 16, 1, 3), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_image(&path).is_err());
}

#[test]
fn normalization_endpoints_and_clamp() {
    let img = ImageBuffer::new(2, 1, 1, vec![0, 255]).unwrap();
    let x = normalize(&img);
    assert_eq!(x.shape(), &[1, 1, 1, 2]);
    assert_eq!(x.data(), &[0.0, 1.0]);
    let out = DiffArray::new([1, 1, 1, 3], vec![-0.1, 1.2, 0.5]).unwrap();
    assert_eq!(denormalize(&out, NormRecord::default()).unwrap().data(), &[0, 255, 128]);
}

#[test]
fn zero_noise_is_identity() {
    let x = normalize(&image(9, 9, 1, 4));
    let (y, sigmas) = add_gaussian_noise(&x, NoiseSpec::fixed(0.0), &mut rng(1)).unwrap();
    assert_eq!(y, x);
    assert_eq!(sigmas, vec![0.0]);
}

#[test]
fn fixed_sigma_noise_statistics() {
    let n = 1000;
    let x = DiffArray::full([1, 1, n, n], 0.5);
    let y = add_noise_with_sigma(&x, 25.0, &mut rng(2)).unwrap();
    let d: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    let want = 25.0 / 255.0;
    assert!((std / want - 1.0).abs() < 0.01, "std {std} vs {want}");
    for axis in [0, 1] {
        let ac = lag1_autocorr(&d, n, n, axis);
        assert!(ac.abs() < 0.01, "axis {axis}: {ac}");
    }

    // Unclamped: noise near black goes negative.
    let dark = add_noise_with_sigma(&DiffArray::full([1, 1, 8, 8], 0.01), 25.0, &mut rng(2)).unwrap();
    assert!(dark.data().iter().any(|v| *v < 0.0));
}

#[test]
fn range_sigma_per_item_within_bounds() {
    let x = DiffArray::zeros([200, 1, 4, 4]);
    let spec = NoiseSpec { sigma_min: 5.0, sigma_max: 50.0 };
    let (_, sigmas) = add_gaussian_noise(&x, spec, &mut rng(3)).unwrap();
    assert_eq!(sigmas.len(), 200);
    assert!(sigmas.iter().all(|s| (5.0..=50.0).contains(s)));
    let mean = sigmas.iter().sum::<f64>() / 200.0;
    assert!((mean - 27.5).abs() < 3.0);
    let bad = NoiseSpec { sigma_min: 10.0, sigma_max: 5.0 };
    assert!(add_gaussian_noise(&x, bad, &mut rng(3)).is_err());
}

#[test]
fn noise_is_seed_deterministic() {
    let x = normalize(&image(8, 8, 1, 5));
    let a = add_gaussian_noise(&x, NoiseSpec::default(), &mut rng(7)).unwrap();
    let b = add_gaussian_noise(&x, NoiseSpec::default(), &mut rng(7)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forced_patch_equals_source() {
    let img = image(32, 32, 1, 6);
    let batch = extract_patches(std::slice::from_ref(&img), 3, 32, 0).unwrap();
    for item in batch.data.data().chunks(32 * 32) {
        assert_eq!(item, normalize(&img).data());
    }
    assert!(batch.positions.iter().all(|p| *p == (0, 0, 0)));
}

#[test]
fn different_seeds_give_different_positions() {
    let img = image(256, 256, 1, 8);
    let a = extract_patches(std::slice::from_ref(&img), 100, 32, 1).unwrap();
    let b = extract_patches(std::slice::from_ref(&img), 100, 32, 2).unwrap();
    let mut pa = a.positions.clone();
    let mut pb = b.positions.clone();
    pa.sort();
    pb.sort();
    assert_ne!(pa, pb);
    assert_eq!(a, extract_patches(std::slice::from_ref(&img), 100, 32, 1).unwrap());
}

#[test]
fn undersized_images_are_skipped() {
    let images = vec![image(8, 8, 1, 0), image(20, 20, 1, 1)];
    let batch = extract_patches(&images, 10, 16, 0).unwrap();
    assert!(batch.positions.iter().all(|p| p.0 == 1));
    assert!(extract_patches(&images[..1], 10, 16, 0).is_err());
}

#[test]
fn split_example_sizes() {
    let paths: Vec<PathBuf> = (0..10).map(|i| PathBuf::from(format!("p{i}.pgm"))).collect();
    let s = split_dataset(&paths, (0.5, 0.4, 0.1), 3).unwrap();
    assert_eq!((s.clean.len(), s.noisy.len(), s.validation.len()), (5, 4, 1));
    assert_eq!(s, split_dataset(&paths, (0.5, 0.4, 0.1), 3).unwrap());
    assert!(split_dataset(&[], (0.5, 0.4, 0.1), 3).is_err());
    assert!(split_dataset(&paths, (0.5, 0.4, 0.2), 3).is_err());
}

#[test]
fn manifests_round_trip_and_overlap_detected() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<PathBuf> = (0..3)
        .map(|i| {
            let p = dir.path().join(format!("img{i}.pgm"));
            save_image(&image(4, 4, 1, i), &p).unwrap();
            p
        })
        .collect();
    let manifest = dir.path().join("list.txt");
    write_manifest(&manifest, &images).unwrap();
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(
        back.iter().map(|p| p.canonicalize().unwrap()).collect::<Vec<_>>(),
        images.iter().map(|p| p.canonicalize().unwrap()).collect::<Vec<_>>()
    );
    assert!(check_disjoint(&images[..2], &images[2..]).is_ok());
    assert!(check_disjoint(&images[..2], &images[1..]).is_err());
}

#[test]
fn synthetic_corpus_is_reproducible() {
    assert_eq!(smooth_corpus(3, 16, 12, 9), smooth_corpus(3, 16, 12, 9));
    assert_ne!(smooth_corpus(3, 16, 12, 9), smooth_corpus(3, 16, 12, 10));
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(w in 1usize..12, h in 1usize..12, c in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let img = image(w, h, c, seed);
        prop_assert_eq!(denormalize(&normalize(&img), NormRecord::default()).unwrap(), img);
    }

    #[test]
    fn split_is_a_partition(n in 1usize..80, a in 0.0f64..1.0, seed in any::<u64>()) {
        let b = (1.0 - a) * 0.7;
        let fractions = (a, b, 1.0 - a - b);
        let paths: Vec<PathBuf> = (0..n).map(|i| PathBuf::from(format!("/d/{i}.png"))).collect();
        let s = split_dataset(&paths, fractions, seed).unwrap();
        let all: Vec<&PathBuf> = s.clean.iter().chain(&s.noisy).chain(&s.validation).collect();
        prop_assert_eq!(all.len(), n);
        let set: BTreeSet<&PathBuf> = all.into_iter().collect();
        prop_assert_eq!(set, paths.iter().collect::<BTreeSet<_>>());
    }

    #[test]
    fn patches_copy_source_exactly(w in 4usize..30, h in 4usize..30, p in 1usize..4, seed in any::<u64>()) {
        let images = vec![image(w, h, 1, seed), image(h, w, 1, seed ^ 1)];
        let batch = extract_patches(&images, 6, p, seed).unwrap();
        for (k, &(i, x, y)) in batch.positions.iter().enumerate() {
            let img = &images[i];
            prop_assert!(x + p <= img.width() && y + p <= img.height());
            for dy in 0..p {
                for dx in 0..p {
                    let want = img.get(x + dx, y + dy, 0) as f64 / 255.0;
                    prop_assert_eq!(batch.data.data()[k * p * p + dy * p + dx], want);
                }
            }
        }
    }
}
