//! Image IO, the degradation simulator and dataset assembly.

pub mod degrade;
pub mod euvp;
pub mod image;
pub mod ppm;
pub mod synth;

use std::path::PathBuf;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use degrade::DegradationParams;

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Disk { degraded: PathBuf, reference: PathBuf },
    Simulated { seed: u64, params: DegradationParams },
}

/// Degraded input and clean reference, both `[3, H, W]` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub degraded: Tensor,
    pub reference: Tensor,
    pub id: String,
    pub provenance: Provenance,
}

impl ImagePair {
    /// Both images mirrored left to right.
    pub fn flipped(&self) -> ImagePair {
        ImagePair {
            degraded: image::hflip(&self.degraded),
            reference: image::hflip(&self.reference),
            ..self.clone()
        }
    }
}

/// Flip both images together with probability 0.5.
pub fn augment_hflip(pair: &ImagePair, rng: &mut impl Rng) -> ImagePair {
    if rng.random_bool(0.5) {
        pair.flipped()
    } else {
        pair.clone()
    }
}

/// Stacked `[n, 3, H, W]` inputs and references.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub degraded: Tensor,
    pub reference: Tensor,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a ImagePair>) -> Result<Batch> {
        let (deg, refs): (Vec<Tensor>, Vec<Tensor>) = pairs
            .into_iter()
            .map(|p| (p.degraded.clone(), p.reference.clone()))
            .unzip();
        if deg.is_empty() {
            return Err(dim_err!("cannot build an empty batch"));
        }
        Ok(Batch {
            degraded: Tensor::stack(&deg)?,
            reference: Tensor::stack(&refs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.degraded.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
