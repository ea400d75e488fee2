//! Markovian patch discriminator over concatenated (degraded, candidate) pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::nn::{export_stats, import_stats, BatchNorm2d};
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const WIDTHS: [usize; 5] = [64, 128, 256, 512, 1];
pub const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
pub const KERNEL: usize = 4;
pub const PADDING: usize = 1;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const INPUT_CHANNELS: usize = 6;

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    /// Only the last layer has a bias; batch norm absorbs it elsewhere.
    pub bias: Option<ParamId>,
    pub norm: Option<BatchNorm2d>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    pub layers: Vec<ConvLayer>,
}

/// Spatial size after one `KERNEL x KERNEL` conv with [`PADDING`].
pub fn conv_out(size: usize, stride: usize) -> Option<usize> {
    (size + 2 * PADDING).checked_sub(KERNEL).map(|v| v / stride + 1)
}

/// Output map side for an `size x size` input, if every layer fits.
pub fn output_size(size: usize, strides: &[usize]) -> Option<usize> {
    strides.iter().try_fold(size, |s, &stride| conv_out(s, stride))
}

impl Discriminator {
    pub fn build(seed: u64) -> Self {
        Self::with_widths(&WIDTHS, seed)
    }

    /// Layer widths other than the default; strides follow [`STRIDES`], with
    /// any extra layers at stride 1.
    pub fn with_widths(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(widths.len());
        let mut c_in = INPUT_CHANNELS;
        for (i, &c_out) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let name = format!("layer{}", i + 1);
            let weight = store.add(
                format!("{name}.weight"),
                normal(&mut rng, &[c_out, c_in, KERNEL, KERNEL], 0.02),
            );
            let bias = last.then(|| store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
            let norm = (!last).then(|| BatchNorm2d::new(&mut store, &format!("{name}.bn"), c_out));
            let stride = if last { 1 } else { STRIDES.get(i).copied().unwrap_or(1) };
            layers.push(ConvLayer {
                weight,
                bias,
                norm,
                stride,
            });
            c_in = c_out;
        }
        Discriminator { params: store, layers }
    }

    pub fn strides(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.stride).collect()
    }

    /// `[n, 6, H, W]` to a `[n, 1, h', w']` map of real-probabilities.
    pub fn forward(&mut self, tape: &mut Tape, pair: Var, train: bool) -> Result<Var> {
        let shape = tape.shape(pair).to_vec();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS {
            return Err(dim_err!(
                "discriminator expects [n, {}, H, W], got {:?}",
                INPUT_CHANNELS,
                shape
            ));
        }
        forward_layers(&mut self.layers, &self.params, tape, pair, train)
    }

    /// Concatenate `degraded` and `candidate` along channels and score them.
    pub fn score(&mut self, tape: &mut Tape, degraded: Var, candidate: Var, train: bool) -> Result<Var> {
        let pair = tape.concat(&[degraded, candidate], 1)?;
        self.forward(tape, pair, train)
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        export_stats(
            self.layers
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.norm.as_ref().map(|bn| (format!("layer{}.bn", i + 1), &bn.stats))),
        )
    }

    pub fn load_buffers<'a>(&mut self, lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        import_stats(
            self.layers
                .iter_mut()
                .enumerate()
                .filter_map(|(i, l)| l.norm.as_mut().map(|bn| (format!("layer{}.bn", i + 1), &mut bn.stats))),
            lookup,
        )
    }
}

/// The conv stack of [`Discriminator::forward`] over parameters in `store`.
pub fn forward_layers(
    layers: &mut [ConvLayer],
    store: &ParamStore,
    tape: &mut Tape,
    pair: Var,
    train: bool,
) -> Result<Var> {
    let mut h = pair;
    for layer in layers {
        let w = tape.param(store, layer.weight);
        let b = layer.bias.map(|b| tape.param(store, b));
        h = tape.conv2d(h, w, b, layer.stride, PADDING)?;
        h = match &mut layer.norm {
            Some(bn) => {
                let h = bn.forward(tape, store, h, train)?;
                tape.leaky_relu(h, LEAKY_SLOPE)
            }
            None => tape.sigmoid(h),
        };
    }
    Ok(h)
}
