//! Underwater image quality measure: colourfulness, sharpness and contrast
//! terms on the 0..255 scale.

use crate::data::image::chw;
use crate::error::Result;
use crate::tensor::Tensor;

pub const C1: f64 = 0.0282;
pub const C2: f64 = 0.2953;
pub const C3: f64 = 3.5753;
pub const TRIM: f64 = 0.1;
pub const BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uiqm {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// Mean of the values left after dropping the `TRIM` fraction at each end.
fn trimmed_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    let lo = (TRIM * k as f64).ceil() as usize;
    let hi = (TRIM * k as f64).floor() as usize;
    let kept = &values[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn spread(values: &[f64], mu: f64) -> f64 {
    values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64
}

fn uicm(r: &[f64], g: &[f64], b: &[f64]) -> f64 {
    let mut rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let mut yb: Vec<f64> = (0..r.len()).map(|i| (r[i] + g[i]) / 2.0 - b[i]).collect();
    let mu_rg = trimmed_mean(&mut rg);
    let mu_yb = trimmed_mean(&mut yb);
    let s_rg = spread(&rg, mu_rg);
    let s_yb = spread(&yb, mu_yb);
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (s_rg + s_yb).sqrt()
}

/// Sobel gradient magnitude rescaled so its maximum is 255 (zero stays zero).
fn sobel(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|m| *m *= 255.0 / max);
    }
    mag
}

/// Blocks of at most `BLOCK x BLOCK`, partial tail blocks dropped.
fn blocks(h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    let (bh, bw) = (BLOCK.min(h), BLOCK.min(w));
    let (k1, k2) = (h / bh, w / bw);
    (0..k1).flat_map(move |i| (0..k2).map(move |j| (i * bh, j * bw, bh, bw)))
}

fn block_count(h: usize, w: usize) -> usize {
    (h / BLOCK.min(h)) * (w / BLOCK.min(w))
}

/// Block extrema over one or more planes.
fn extrema(planes: &[&[f64]], w: usize, (y0, x0, bh, bw): (usize, usize, usize, usize)) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in planes {
        for y in y0..y0 + bh {
            for &v in &p[y * w + x0..y * w + x0 + bw] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (lo, hi)
}

/// Measure of enhancement: mean of `2 ln(max / min)` over blocks.
fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let sum: f64 = blocks(h, w)
        .map(|blk| {
            let (lo, hi) = extrema(&[plane], w, blk);
            if lo > 0.0 && hi > 0.0 {
                (hi / lo).ln()
            } else {
                0.0
            }
        })
        .sum();
    2.0 * sum / block_count(h, w) as f64
}

fn uism(planes: [&[f64]; 3], h: usize, w: usize) -> f64 {
    let weights = [0.299, 0.587, 0.114];
    planes
        .iter()
        .zip(weights)
        .map(|(p, wt)| {
            let edges: Vec<f64> = sobel(p, h, w).iter().zip(p.iter()).map(|(e, v)| e * v).collect();
            wt * eme(&edges, h, w)
        })
        .sum()
}

/// Log-AMEE contrast of blocks spanning all three channels.
fn uiconm(planes: [&[f64]; 3], h: usize, w: usize) -> f64 {
    let sum: f64 = blocks(h, w)
        .map(|blk| {
            let (lo, hi) = extrema(&planes, w, blk);
            let (top, bot) = (hi - lo, hi + lo);
            if top > 0.0 && bot > 0.0 {
                let r = top / bot;
                r * r.ln()
            } else {
                0.0
            }
        })
        .sum();
    (sum / block_count(h, w) as f64).abs()
}

/// UIQM of a `[3, H, W]` image in `[0, 1]`.
pub fn uiqm(image: &Tensor) -> Result<Uiqm> {
    let (h, w) = chw(image)?;
    let n = h * w;
    let scaled: Vec<f64> = image.data().iter().map(|&v| v as f64 * 255.0).collect();
    let (r, rest) = scaled.split_at(n);
    let (g, b) = rest.split_at(n);
    let uicm = uicm(r, g, b);
    let uism = uism([r, g, b], h, w);
    let uiconm = uiconm([r, g, b], h, w);
    Ok(Uiqm {
        uicm,
        uism,
        uiconm,
        uiqm: C1 * uicm + C2 * uism + C3 * uiconm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimmed_mean_drops_tails() {
        let mut v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        v[9] = 1000.0;
        assert_eq!(trimmed_mean(&mut v), (1..9).sum::<usize>() as f64 / 8.0);
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(uiqm(&Tensor::zeros([1, 8, 8])).is_err());
    }
}
