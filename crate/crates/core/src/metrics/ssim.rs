use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// ITU-R BT.601 luma of a `[3, H, W]` image; `[1, H, W]` passes through.
pub fn luma(image: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    match *image.shape() {
        [3, h, w] => {
            let n = h * w;
            let d = image.data();
            let y = (0..n)
                .map(|i| 0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64)
                .collect();
            Ok((h, w, y))
        }
        [1, h, w] => Ok((h, w, image.data().iter().map(|&v| v as f64).collect())),
        ref s => Err(dim_err!("expected a [3, H, W] or [1, H, W] image, got {:?}", s)),
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over all fully contained windows.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with Gaussian weighting over luma, dynamic range `l`.
pub fn ssim(x: &Tensor, y: &Tensor, l: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(dim_err!("ssim of {:?} against {:?}", x.shape(), y.shape()));
    }
    let (h, w, a) = luma(x)?;
    let (_, _, b) = luma(y)?;
    if h < WINDOW || w < WINDOW {
        return Err(dim_err!(
            "ssim needs at least {0}x{0} images, got {1}x{2}",
            WINDOW,
            h,
            w
        ));
    }
    let k = gaussian_kernel(WINDOW, SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &k);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &k);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &k);
    let c1 = (K1 * l).powi(2);
    let c2 = (K2 * l).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}
