//! Small parameterized layers shared by the generator and discriminator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

pub const LN_EPS: f32 = 1e-5;

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[in_dim, out_dim], 0.02));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Per-channel batch normalization over `[n, c, h, w]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(x, g, b, &mut self.stats, train)
    }
}

/// Running statistics of several batch-norm layers as named tensors.
pub(crate) fn export_stats<'a>(layers: impl Iterator<Item = (String, &'a RunningStats)>) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (name, s) in layers {
        let c = s.mean.len();
        out.push((
            format!("{name}.running_mean"),
            Tensor::from_parts(vec![c], s.mean.clone()),
        ));
        out.push((
            format!("{name}.running_var"),
            Tensor::from_parts(vec![c], s.var.clone()),
        ));
    }
    out
}

/// Inverse of [`export_stats`].
pub(crate) fn import_stats<'a, 'b>(
    layers: impl Iterator<Item = (String, &'a mut RunningStats)>,
    mut lookup: impl FnMut(&str) -> Option<&'b Tensor>,
) -> Result<()> {
    for (name, s) in layers {
        for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
            let key = format!("{name}.{suffix}");
            let t = lookup(&key).ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{key}`")))?;
            if t.shape() != [dst.len()] {
                return Err(Error::Config(format!(
                    "`{key}` expects {} values, checkpoint has shape {:?}",
                    dst.len(),
                    t.shape()
                )));
            }
            dst.copy_from_slice(t.data());
        }
    }
    Ok(())
}
