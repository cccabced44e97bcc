use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::{load_image, ImageBuffer};
use crate::error::{Error, Result};

/// One path per line; blank lines are ignored and relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::Empty(format!("manifest {} lists no images", path.display())));
    }
    Ok(entries)
}

/// Writes paths relative to the manifest's directory where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[PathBuf]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let rel = e.strip_prefix(base).unwrap_or(e);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest_images(path: impl AsRef<Path>) -> Result<(Vec<PathBuf>, Vec<ImageBuffer>)> {
    let paths = read_manifest(path)?;
    let images = paths.iter().map(load_image).collect::<Result<_>>()?;
    Ok((paths, images))
}

fn identity(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Fails with [`Error::ManifestOverlap`] if any file appears in both lists.
pub fn check_disjoint(a: &[PathBuf], b: &[PathBuf]) -> Result<()> {
    let seen: HashSet<PathBuf> = a.iter().map(|p| identity(p)).collect();
    let shared: Vec<&PathBuf> = b.iter().filter(|p| seen.contains(&identity(p))).collect();
    match shared.first() {
        None => Ok(()),
        Some(&first) => Err(Error::ManifestOverlap { count: shared.len(), example: first.clone() }),
    }
}
