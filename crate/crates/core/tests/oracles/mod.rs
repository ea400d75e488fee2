//! Straight-line reference implementations shared by the integration tests
//! and the acceptance target. Everything here is f64 and loop-based.
#![allow(dead_code)]

pub mod probes;

use swinpg::params::ParamStore;
use swinpg::swin::SwinBlockParams;

/// Attention weights of one block, copied out as f64.
pub struct AttnWeights {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// `[dim, 3 * dim]`, output laid out as (q|k|v, head, head_dim).
    pub wqkv: Vec<f64>,
    pub bqkv: Vec<f64>,
    pub wproj: Vec<f64>,
    pub bproj: Vec<f64>,
    /// `[(2M-1)^2, heads]`.
    pub table: Vec<f64>,
}

fn f64s(store: &ParamStore, id: swinpg::params::ParamId) -> Vec<f64> {
    store.get(id).value.data().iter().map(|&v| v as f64).collect()
}

impl AttnWeights {
    pub fn from_block(store: &ParamStore, p: &SwinBlockParams) -> Self {
        AttnWeights {
            dim: p.dim,
            heads: p.heads,
            window: p.window,
            wqkv: f64s(store, p.qkv.weight),
            bqkv: f64s(store, p.qkv.bias.unwrap()),
            wproj: f64s(store, p.proj.weight),
            bproj: f64s(store, p.proj.bias.unwrap()),
            table: f64s(store, p.bias_table),
        }
    }
}

fn linear(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    (0..out_dim)
        .map(|o| b[o] + (0..in_dim).map(|i| x[i] * w[i * out_dim + o]).sum::<f64>())
        .collect()
}

/// Multi-head attention over `tokens` (each `dim` long). `pos` gives each
/// token's (row, col) inside its window for the relative bias, and token `i`
/// attends to `j` only when `allowed(i, j)`.
pub fn dense_attention(
    w: &AttnWeights,
    tokens: &[Vec<f64>],
    pos: &[(usize, usize)],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let (c, heads) = (w.dim, w.heads);
    let hd = c / heads;
    let m = w.window as isize;
    let qkv: Vec<Vec<f64>> = tokens.iter().map(|t| linear(t, &w.wqkv, &w.bqkv, c, 3 * c)).collect();
    let scale = 1.0 / (hd as f64).sqrt();
    tokens
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let mut concat = vec![0.0; c];
            for h in 0..heads {
                let q = &qkv[i][h * hd..(h + 1) * hd];
                let keys: Vec<usize> = (0..tokens.len()).filter(|&j| allowed(i, j)).collect();
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let k = &qkv[j][c + h * hd..c + (h + 1) * hd];
                        let dr = pos[i].0 as isize - pos[j].0 as isize;
                        let dc = pos[i].1 as isize - pos[j].1 as isize;
                        let row = ((dr + m - 1) * (2 * m - 1) + (dc + m - 1)) as usize;
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale + w.table[row * heads + h]
                    })
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for (&j, ej) in keys.iter().zip(&e) {
                    let v = &qkv[j][2 * c + h * hd..2 * c + (h + 1) * hd];
                    for d in 0..hd {
                        concat[h * hd + d] += ej / z * v[d];
                    }
                }
            }
            linear(&concat, &w.wproj, &w.bproj, c, c)
        })
        .collect()
}

/// Gaussian-weighted SSIM over the luma of two `[3, H, W]` images, written
/// directly from the definition with valid 11x11 windows.
pub fn ssim_reference(x: &[f32], y: &[f32], h: usize, w: usize, l: f64) -> f64 {
    let luma = |img: &[f32]| -> Vec<f64> {
        let n = h * w;
        (0..n)
            .map(|i| 0.299 * img[i] as f64 + 0.587 * img[n + i] as f64 + 0.114 * img[2 * n + i] as f64)
            .collect()
    };
    let (a, b) = (luma(x), luma(y));
    let size = 11;
    let sigma = 1.5f64;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - 5.0;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let gs: f64 = g.iter().sum();
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - size {
        for ox in 0..=w - size {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..size {
                for kx in 0..size {
                    let wt = g[ky] * g[kx] / (gs * gs);
                    let (p, q) = (a[(oy + ky) * w + ox + kx], b[(oy + ky) * w + ox + kx]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
