use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &Tensor, y: &Tensor, max_value: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(dim_err!("psnr of {:?} against {:?}", x.shape(), y.shape()));
    }
    if max_value.is_nan() || max_value <= 0.0 {
        return Err(Error::Contract(format!("max_value must be positive, got {max_value}")));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}
