//! Paired-folder datasets in the EUVP layout (`trainA/` degraded, `trainB/`
//! reference), matched by filename stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::image::{resize_bilinear, rgb8_to_unit, unit_to_signed};
use super::ppm::read_ppm;
use super::{ImagePair, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn dirs(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("trainA", "trainB"),
            Split::Validation => ("validationA", "validationB"),
        }
    }
}

/// Optional `manifest.json` at the dataset root listing pairs explicitly.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pairs: Vec<ManifestPair>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    /// Degraded image, relative to the root.
    pub a: PathBuf,
    /// Reference image, relative to the root.
    pub b: PathBuf,
}

pub const MANIFEST: &str = "manifest.json";

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.is_file() && !stem.starts_with('.') {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

/// Matched `(id, degraded, reference)` paths, sorted by id.
pub fn pair_paths(root: &Path, split: Split) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let manifest = root.join(MANIFEST);
    if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let mut pairs: Vec<_> = m
            .pairs
            .into_iter()
            .map(|p| {
                let id =
                    p.a.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                (id, root.join(p.a), root.join(p.b))
            })
            .collect();
        pairs.sort();
        return Ok(pairs);
    }
    let (a_dir, b_dir) = split.dirs();
    let a = stems(&root.join(a_dir))?;
    let b = stems(&root.join(b_dir))?;
    let orphans: Vec<String> = a
        .iter()
        .filter(|(s, _)| !b.contains_key(*s))
        .chain(b.iter().filter(|(s, _)| !a.contains_key(*s)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Pairing(orphans));
    }
    Ok(a.into_iter()
        .map(|(stem, pa)| {
            let pb = b[&stem].clone();
            (stem, pa, pb)
        })
        .collect())
}

/// Read a PPM, resize to `size x size` and map to `[-1, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = rgb8_to_unit(&read_ppm(path)?);
    Ok(unit_to_signed(&resize_bilinear(&img, size, size)?))
}

pub fn load_euvp_dir(root: &Path, split: Split, size: usize) -> Result<Vec<ImagePair>> {
    pair_paths(root, split)?
        .into_iter()
        .map(|(id, a, b)| {
            Ok(ImagePair {
                degraded: load_image(&a, size)?,
                reference: load_image(&b, size)?,
                id,
                provenance: Provenance::Disk {
                    degraded: a,
                    reference: b,
                },
            })
        })
        .collect()
}
