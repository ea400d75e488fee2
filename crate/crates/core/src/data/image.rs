//! Conversions between 8-bit images and float tensors, resizing and flips.
//!
//! Float images are `[3, H, W]` tensors, in `[0, 1]` ("unit") or `[-1, 1]`
//! ("signed") range.

use super::ppm::Rgb8;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub fn rgb8_to_unit(image: &Rgb8) -> Tensor {
    let (h, w) = (image.height, image.width);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Clamp to `[0, 1]` and round to the nearest 8-bit level.
pub fn unit_to_rgb8(image: &Tensor) -> Result<Rgb8> {
    let (h, w) = chw(image)?;
    let d = image.data();
    let mut data = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[3 * i + c] = (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Rgb8::new(w, h, data)
}

/// Snap every value onto the 8-bit grid.
pub fn quantize_unit(image: &Tensor) -> Tensor {
    let data = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

pub fn unit_to_signed(image: &Tensor) -> Tensor {
    map(image, |v| 2.0 * v - 1.0)
}

pub fn signed_to_unit(image: &Tensor) -> Tensor {
    map(image, |v| (v + 1.0) * 0.5)
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn chw(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(dim_err!("expected a [3, H, W] image, got {:?}", s)),
    }
}

/// Bilinear resampling of `[c, h, w]` with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(dim_err!("resize expects [c, h, w], got {:?}", image.shape()));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Contract(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Mirror `[c, h, w]` left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut data = image.to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::from_parts(s.to_vec(), data)
}
