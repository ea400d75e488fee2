//! Dataset evaluation and the JSON metric report.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::{hist_equalize, psnr, ssim, uiqm};
use crate::data::image::{rgb8_to_unit, signed_to_unit, unit_to_rgb8};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// A trained model, no baseline.
    None,
    /// The degraded input itself.
    Identity,
    Histeq,
}

/// Serializes infinities as the strings `"inf"` / `"-inf"`.
mod finite_or_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected value `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub uiqm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "finite_or_inf")]
    pub psnr_mean: f64,
    #[serde(with = "finite_or_inf")]
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub uiqm_mean: f64,
    pub uiqm_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub baseline: Baseline,
    pub config_digest: String,
}

/// Population mean and standard deviation. Equal values (infinite ones
/// included) have zero spread; a mix of finite and infinite has infinite spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    if values.iter().any(|v| v.is_infinite()) {
        return (values.iter().sum::<f64>() / n, f64::INFINITY);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What produces the enhanced image for each pair.
pub enum Enhancer<'a> {
    Model(&'a mut Generator),
    Baseline(Baseline),
}

impl Enhancer<'_> {
    /// Enhanced `[3, H, W]` image in `[0, 1]`.
    fn enhance(&mut self, degraded: &Tensor) -> Result<Tensor> {
        match self {
            Enhancer::Model(g) => {
                let shape = degraded.shape().to_vec();
                let batch = degraded.reshape([1, shape[0], shape[1], shape[2]])?;
                let out = g.enhance(&batch)?;
                Ok(signed_to_unit(&out.reshape(shape)?))
            }
            Enhancer::Baseline(Baseline::Identity | Baseline::None) => Ok(signed_to_unit(degraded)),
            Enhancer::Baseline(Baseline::Histeq) => {
                let img = unit_to_rgb8(&signed_to_unit(degraded))?;
                Ok(rgb8_to_unit(&hist_equalize(&img)))
            }
        }
    }

    fn tag(&self) -> Baseline {
        match self {
            Enhancer::Model(_) => Baseline::None,
            Enhancer::Baseline(b) => *b,
        }
    }
}

pub fn image_metrics(id: &str, enhanced: &Tensor, reference: &Tensor) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        id: id.to_owned(),
        psnr: psnr(enhanced, reference, 1.0)?,
        ssim: ssim(enhanced, reference, 1.0)?,
        uiqm: uiqm(enhanced)?.uiqm,
    })
}

/// Metrics of every pair's enhanced image against its reference, in `[0, 1]`,
/// reported in id order.
pub fn evaluate_dataset(mut enhancer: Enhancer<'_>, pairs: &[ImagePair], config_digest: &str) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set of pairs".into()));
    }
    let mut order: Vec<&ImagePair> = pairs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut images = Vec::with_capacity(order.len());
    for pair in order {
        let enhanced = enhancer.enhance(&pair.degraded)?;
        images.push(image_metrics(&pair.id, &enhanced, &signed_to_unit(&pair.reference))?);
    }
    let column = |f: fn(&ImageMetrics) -> f64| mean_std(&images.iter().map(f).collect::<Vec<_>>());
    let (psnr_mean, psnr_std) = column(|m| m.psnr);
    let (ssim_mean, ssim_std) = column(|m| m.ssim);
    let (uiqm_mean, uiqm_std) = column(|m| m.uiqm);
    Ok(MetricReport {
        aggregate: Aggregate {
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            uiqm_mean,
            uiqm_std,
        },
        images,
        baseline: enhancer.tag(),
        config_digest: config_digest.to_owned(),
    })
}
