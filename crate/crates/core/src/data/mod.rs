//! Images, corpora and the noise model.

mod image;
mod manifest;
mod noise;
mod patches;
mod split;
pub mod synth;

pub use image::{denormalize, load_image, normalize, save_image, ImageBuffer, NormRecord};
pub use manifest::{check_disjoint, load_manifest_images, read_manifest, write_manifest};
pub use noise::{add_gaussian_noise, add_noise_with_sigma, NoiseSpec};
pub use patches::{extract_patches, extract_patches_from_arrays, extract_patches_with, PatchBatch};
pub use split::{split_dataset, DatasetSplit};
