//! Procedural clean scenes paired with simulated degradations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::degrade::{degrade, DegradationParams, DepthStyle};
use super::image::{quantize_unit, unit_to_signed};
use super::{ImagePair, Provenance};
use crate::error::Result;
use crate::tensor::Tensor;

/// A colourful `[3, size, size]` scene in `[0, 1]`: a gradient backdrop,
/// a few discs and rectangles, and a sinusoidal texture.
pub fn clean_scene(size: usize, rng: &mut impl Rng) -> Tensor {
    let n = size * size;
    let mut img = vec![0.0f32; 3 * n];
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let coord = |i: usize| (i as f32 + 0.5) / size as f32;
    for y in 0..size {
        for x in 0..size {
            let s = ((coord(x) - 0.5) * dx + (coord(y) - 0.5) * dy + 0.71) / 1.42;
            for c in 0..3 {
                img[c * n + y * size + x] = c0[c] + (c1[c] - c0[c]) * s;
            }
        }
    }
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (cx, cy) = (rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0f32));
        let r = rng.random_range(0.08..0.3f32);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (coord(x) - cx, coord(y) - cy);
                let inside = if disc {
                    u * u + v * v <= r * r
                } else {
                    u.abs() <= r && v.abs() <= 0.6 * r
                };
                if inside {
                    for c in 0..3 {
                        img[c * n + y * size + x] = color[c];
                    }
                }
            }
        }
    }
    let freq = rng.random_range(2.0..8.0f32) * std::f32::consts::TAU;
    let amp = rng.random_range(0.02..0.08f32);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let wave = amp * (freq * (coord(x) * dy - coord(y) * dx) + phase).sin();
            for c in 0..3 {
                let v = &mut img[c * n + y * size + x];
                *v = (*v + wave).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], img)
}

/// `n` simulated pairs with the default degradation, cycling depth styles.
pub fn generate_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    generate_dataset_with(n, size, seed, &DegradationParams::default())
}

/// Pair `i` depends only on `(seed, i)`; both images sit on the 8-bit grid.
pub fn generate_dataset_with(n: usize, size: usize, seed: u64, base: &DegradationParams) -> Result<Vec<ImagePair>> {
    const STYLES: [DepthStyle; 3] = [DepthStyle::SmoothNoise, DepthStyle::Linear, DepthStyle::Constant];
    base.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let clean = quantize_unit(&clean_scene(size, &mut rng));
            let params = DegradationParams {
                depth_style: STYLES[i % 3],
                ..base.clone()
            };
            let pair_seed = rng.random::<u64>();
            let degraded = quantize_unit(&degrade(&clean, &params, pair_seed)?);
            Ok(ImagePair {
                degraded: unit_to_signed(&degraded),
                reference: unit_to_signed(&clean),
                id: format!("sim{seed}_{i:05}"),
                provenance: Provenance::Simulated {
                    seed: pair_seed,
                    params,
                },
            })
        })
        .collect()
}
