//! Underwater image formation `I = J t + B (1 - t)` with `t = exp(-beta depth)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{chw, resize_bilinear};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStyle {
    Constant,
    /// Depth ramps across the image in a seeded direction.
    Linear,
    /// Bilinearly upsampled coarse random grid.
    SmoothNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationParams {
    /// Veiling light per channel, RGB.
    pub background: [f32; 3],
    /// Attenuation per unit depth per channel, RGB.
    pub beta: [f32; 3],
    pub depth_style: DepthStyle,
    /// Depth at the far end of the normalized depth field.
    pub haze: f32,
    /// Scale of deviations from the per-channel mean; 1 keeps contrast.
    pub contrast: f32,
}

impl Default for DegradationParams {
    fn default() -> Self {
        DegradationParams {
            background: [0.05, 0.35, 0.45],
            beta: [1.2, 0.45, 0.3],
            depth_style: DepthStyle::SmoothNoise,
            haze: 1.5,
            contrast: 0.8,
        }
    }
}

impl DegradationParams {
    /// Parameters that leave an image untouched.
    pub fn clear() -> Self {
        DegradationParams {
            haze: 0.0,
            contrast: 1.0,
            depth_style: DepthStyle::Constant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.background.iter().all(|b| (0.0..=1.0).contains(b)) {
            return bad(format!("background light {:?} must lie in [0, 1]", self.background));
        }
        if !self.beta.iter().all(|b| b.is_finite() && *b >= 0.0) {
            return bad(format!("attenuation {:?} must be finite and nonnegative", self.beta));
        }
        if !(self.haze.is_finite() && self.haze >= 0.0) {
            return bad(format!("haze {} must be finite and nonnegative", self.haze));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast factor {} must lie in (0, 1]", self.contrast));
        }
        Ok(())
    }
}

/// Normalized depth field in `[0, 1]`, shape `[h, w]` flattened.
pub fn depth_field(style: DepthStyle, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f32> {
    match style {
        DepthStyle::Constant => vec![1.0; h * w],
        DepthStyle::Linear => {
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let proj = |y: usize, x: usize| {
                let u = (x as f32 + 0.5) / w as f32 - 0.5;
                let v = (y as f32 + 0.5) / h as f32 - 0.5;
                u * dx + v * dy
            };
            let corners = [proj(0, 0), proj(0, w - 1), proj(h - 1, 0), proj(h - 1, w - 1)];
            let lo = corners.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = corners.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = (hi - lo).max(1e-6);
            let mut d = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    d.push(0.2 + 0.8 * (proj(y, x) - lo) / span);
                }
            }
            d
        }
        DepthStyle::SmoothNoise => {
            let coarse: Vec<f32> = (0..16).map(|_| rng.random_range(0.2..1.0)).collect();
            let grid = Tensor::from_parts(vec![1, 4, 4], coarse);
            resize_bilinear(&grid, h, w).expect("positive sizes").into_vec()
        }
    }
}

/// Per-channel transmission `[3, h, w]`, every value in `(0, 1]`.
pub fn transmission(params: &DegradationParams, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = depth_field(params.depth_style, h, w, &mut rng);
    let mut t = Vec::with_capacity(3 * h * w);
    for beta in params.beta {
        t.extend(depth.iter().map(|d| (-beta * params.haze * d).exp()));
    }
    Tensor::from_parts(vec![3, h, w], t)
}

/// `J t + B (1 - t)` per channel, no clipping.
pub fn apply_formation(clean: &Tensor, t: &Tensor, background: [f32; 3]) -> Result<Tensor> {
    let (h, w) = chw(clean)?;
    if t.shape() != clean.shape() {
        return Err(dim_err!(
            "transmission {:?} does not match image {:?}",
            t.shape(),
            clean.shape()
        ));
    }
    let (j, tt) = (clean.data(), t.data());
    let n = h * w;
    let data = (0..3 * n)
        .map(|i| {
            let b = background[i / n];
            j[i] * tt[i] + b * (1.0 - tt[i])
        })
        .collect();
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Pull every channel toward its mean by `factor`.
pub fn reduce_contrast(image: &Tensor, factor: f32) -> Tensor {
    let n = image.numel() / 3;
    let mut data = image.to_vec();
    for plane in data.chunks_exact_mut(n) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let mean = mean as f32;
        for v in plane {
            *v = mean + factor * (*v - mean);
        }
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Formation model and contrast reduction without the final clip.
pub fn degrade_unclipped(clean: &Tensor, params: &DegradationParams, seed: u64) -> Result<Tensor> {
    params.validate()?;
    let (h, w) = chw(clean)?;
    let t = transmission(params, h, w, seed);
    let formed = apply_formation(clean, &t, params.background)?;
    Ok(if params.contrast == 1.0 {
        formed
    } else {
        reduce_contrast(&formed, params.contrast)
    })
}

/// Simulated underwater view of a clean `[3, h, w]` image in `[0, 1]`.
pub fn degrade(clean: &Tensor, params: &DegradationParams, seed: u64) -> Result<Tensor> {
    let out = degrade_unclipped(clean, params, seed)?;
    let data = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_parts(out.shape().to_vec(), data))
}
