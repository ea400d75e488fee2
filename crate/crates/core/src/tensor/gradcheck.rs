//! Central finite-difference checks of every differentiable operator and of
//! the composite layers built from them.
//!
//! Each check draws seeded inputs, reduces the op output to a scalar with a
//! fixed random projection `sum(R * y)`, and compares the tape gradient with
//! `sum(R * (y(x + e) - y(x - e))) / 2e` accumulated in f64. Coordinates are
//! subsampled for large tensors. Cases with an f64 reference forward take
//! their finite differences from it, at their own step, rather than from the
//! f32 tape. The error of one checked tensor is
//! `max|a - f| / max(max|a|, max|f|, 1e-6)`; the report keeps the worst tensor.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Reduction, RunningStats, Tape, Tensor, Var};
use crate::discriminator::{forward_layers, ConvLayer, Discriminator, LEAKY_SLOPE, PADDING};
use crate::error::{Error, Result};
use crate::generator::ConvBlock;
use crate::params::{normal, uniform, ParamStore};
use crate::swin::{
    build_shift_mask, swin_block, window_attention, window_partition, window_reverse, PatchEmbed, PatchExpand,
    PatchMerge, SwinBlockParams,
};
use crate::train::loss::{loss_discriminator, loss_generator, loss_l1};

pub const EPSILON: f32 = 1e-3;
pub const SINGLE_OP_TOLERANCE: f64 = 1e-2;
pub const SWIN_BLOCK_TOLERANCE: f64 = 3e-2;
pub const DISCRIMINATOR_TOLERANCE: f64 = 2e-2;

const MAX_INPUT_COORDS: usize = 32;
const MAX_PARAM_COORDS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A dense f64 array for reference forwards.
#[derive(Clone, Debug)]
struct Buf64 {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<&Tensor> for Buf64 {
    fn from(t: &Tensor) -> Self {
        Buf64 {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// The forward of a case recomputed in f64 from its inputs and parameters.
type Reference<M> = fn(&M, &[Buf64], &[Buf64]) -> Vec<f64>;

/// Something differentiable with optional parameters in a store.
struct Case<M> {
    inputs: Vec<Tensor>,
    store: ParamStore,
    module: M,
    forward: fn(&mut M, &ParamStore, &mut Tape, &[Var]) -> Result<Var>,
    /// Reference forward and its finite-difference step.
    reference: Option<(Reference<M>, f64)>,
}

trait Checkable {
    fn run(&mut self, seed: u64) -> Result<f64>;
}

impl<M> Checkable for Case<M> {
    fn run(&mut self, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = (self.forward)(&mut self.module, &self.store, &mut tape, &vars)?;
        let proj = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
        let mut grads = tape.backward_with(out, proj.to_vec())?;
        let input_grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        self.store.zero_grad();
        tape.accumulate_into(&mut grads, &mut self.store);
        let param_grads: Vec<Vec<f32>> = self
            .store
            .iter()
            .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        self.store.zero_grad();

        let mut worst = 0.0f64;
        for (i, analytic) in input_grads.iter().enumerate() {
            let coords = pick(&mut rng, analytic.len(), MAX_INPUT_COORDS);
            let mut fd = Vec::with_capacity(coords.len());
            for &c in &coords {
                fd.push(self.central_difference(&proj, Slot::Input(i), c)?);
            }
            let e = rel_error(analytic, &coords, &fd);
            worst = worst.max(e);
        }
        for (p, analytic) in param_grads.iter().enumerate() {
            let coords = pick(&mut rng, analytic.len(), MAX_PARAM_COORDS);
            let mut fd = Vec::with_capacity(coords.len());
            for &c in &coords {
                fd.push(self.central_difference(&proj, Slot::Param(p), c)?);
            }
            let e = rel_error(analytic, &coords, &fd);
            worst = worst.max(e);
        }
        Ok(worst)
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Input(usize),
    Param(usize),
}

impl<M> Case<M> {
    fn eval(&mut self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.forward)(&mut self.module, &self.store, &mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    fn value_mut(&mut self, slot: Slot) -> &mut Tensor {
        match slot {
            Slot::Input(i) => &mut self.inputs[i],
            Slot::Param(p) => &mut self.store.iter_mut().nth(p).expect("parameter index").value,
        }
    }

    fn central_difference(&mut self, proj: &Tensor, slot: Slot, coord: usize) -> Result<f64> {
        if let Some((reference, eps)) = self.reference {
            let mut inputs: Vec<Buf64> = self.inputs.iter().map(Buf64::from).collect();
            let mut params: Vec<Buf64> = self.store.iter().map(|p| Buf64::from(&p.value)).collect();
            let mut at = |delta: f64| {
                let buf = match slot {
                    Slot::Input(i) => &mut inputs[i],
                    Slot::Param(p) => &mut params[p],
                };
                let x = buf.data[coord];
                buf.data[coord] = x + delta;
                let y = reference(&self.module, &inputs, &params);
                match slot {
                    Slot::Input(i) => inputs[i].data[coord] = x,
                    Slot::Param(p) => params[p].data[coord] = x,
                }
                y
            };
            let (plus, minus) = (at(eps), at(-eps));
            let diff: f64 = proj
                .data()
                .iter()
                .zip(plus.iter().zip(&minus))
                .map(|(&r, (p, m))| r as f64 * (p - m))
                .sum();
            return Ok(diff / (2.0 * eps));
        }
        let x = self.value_mut(slot).data()[coord];
        let (hi, lo) = (x + EPSILON, x - EPSILON);
        self.value_mut(slot).data_mut()[coord] = hi;
        let plus = self.eval()?;
        self.value_mut(slot).data_mut()[coord] = lo;
        let minus = self.eval()?;
        self.value_mut(slot).data_mut()[coord] = x;
        let diff: f64 = proj
            .data()
            .iter()
            .zip(plus.data().iter().zip(minus.data()))
            .map(|(&r, (&p, &m))| r as f64 * (p as f64 - m as f64))
            .sum();
        Ok(diff / (hi as f64 - lo as f64))
    }
}

fn pick(rng: &mut impl Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

fn rel_error(analytic: &[f32], coords: &[usize], fd: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 1e-6f64;
    for (&c, &f) in coords.iter().zip(fd) {
        let a = analytic[c] as f64;
        diff = diff.max((a - f).abs());
        scale = scale.max(a.abs()).max(f.abs());
    }
    diff / scale
}

/// Values in `[-1, 1]` kept at least 0.05 away from zero, clear of kinks.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let t = uniform(rng, shape, 0.05, 1.0);
    let data = t
        .data()
        .iter()
        .map(|&v| if rng.random_bool(0.5) { v } else { -v })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn plain(
    inputs: Vec<Tensor>,
    forward: fn(&mut (), &ParamStore, &mut Tape, &[Var]) -> Result<Var>,
) -> Box<dyn Checkable> {
    Box::new(Case {
        inputs,
        store: ParamStore::new(),
        module: (),
        forward,
        reference: None,
    })
}

/// Re-draw every parameter so composite checks see gradients of order one
/// rather than the tiny ones of a fresh initialization.
fn scramble(store: &mut ParamStore, rng: &mut impl Rng, std: f32) {
    for p in store.iter_mut() {
        p.value = normal(rng, p.value.shape(), std);
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "gelu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softmax",
    "layer_norm",
    "batch_norm",
    "roll",
    "reshape",
    "permute",
    "concat",
    "split",
    "sum",
    "mean",
    "abs_mean",
    "add",
    "sub",
    "mul",
    "add_broadcast",
    "log",
    "gather_rows",
    "loss_l1",
    "loss_generator",
    "loss_discriminator",
    "window_partition_reverse",
    "window_attention",
    "swin_block",
    "patch_embed",
    "patch_merge",
    "patch_expand",
    "conv_block",
    "discriminator",
];

pub fn tolerance(op: &str) -> f64 {
    match op {
        "swin_block" => SWIN_BLOCK_TOLERANCE,
        "discriminator" => DISCRIMINATOR_TOLERANCE,
        _ => SINGLE_OP_TOLERANCE,
    }
}

fn build(op: &str, rng: &mut ChaCha8Rng) -> Result<Box<dyn Checkable>> {
    let u = |rng: &mut ChaCha8Rng, shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    Ok(match op {
        "matmul" => plain(vec![u(rng, &[4, 5]), u(rng, &[5, 3])], |_, _, t, v| {
            t.matmul(v[0], v[1])
        }),
        "conv2d" => plain(
            vec![u(rng, &[1, 2, 6, 6]), u(rng, &[3, 2, 3, 3]), u(rng, &[3])],
            |_, _, t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        "gelu" => plain(vec![u(rng, &[16])], |_, _, t, v| Ok(t.gelu(v[0]))),
        "leaky_relu" => plain(vec![away_from_zero(rng, &[16])], |_, _, t, v| {
            Ok(t.leaky_relu(v[0], 0.2))
        }),
        "tanh" => plain(vec![u(rng, &[16])], |_, _, t, v| Ok(t.tanh(v[0]))),
        "sigmoid" => plain(vec![u(rng, &[16])], |_, _, t, v| Ok(t.sigmoid(v[0]))),
        "softmax" => plain(vec![u(rng, &[3, 5])], |_, _, t, v| t.softmax(v[0], -1)),
        "layer_norm" => plain(
            vec![u(rng, &[4, 8]), uniform(rng, &[8], 0.5, 1.5), u(rng, &[8])],
            |_, _, t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        "batch_norm" => Box::new(Case {
            inputs: vec![u(rng, &[4, 2, 3, 3]), uniform(rng, &[2], 0.5, 1.5), u(rng, &[2])],
            store: ParamStore::new(),
            module: RunningStats::new(2),
            forward: |stats, _, t, v| t.batch_norm(v[0], v[1], v[2], stats, true),
            reference: None,
        }),
        "roll" => plain(vec![u(rng, &[1, 4, 5, 2])], |_, _, t, v| t.roll(v[0], 1, -2)),
        "reshape" => plain(vec![u(rng, &[2, 3, 4])], |_, _, t, v| t.reshape(v[0], &[4, 6])),
        "permute" => plain(vec![u(rng, &[2, 3, 4])], |_, _, t, v| t.permute(v[0], &[2, 0, 1])),
        "concat" => plain(vec![u(rng, &[2, 3]), u(rng, &[2, 2])], |_, _, t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        "split" => plain(vec![u(rng, &[3, 5])], |_, _, t, v| {
            let parts = t.split(v[0], 1, &[2, 3])?;
            let a = t.scale(parts[0], 2.0);
            let b = t.tanh(parts[1]);
            t.concat(&[b, a], 1)
        }),
        "sum" => plain(vec![u(rng, &[3, 4])], |_, _, t, v| t.sum(v[0], &[0])),
        "mean" => plain(vec![u(rng, &[3, 4])], |_, _, t, v| t.mean(v[0], &[1])),
        "abs_mean" => plain(vec![away_from_zero(rng, &[3, 4])], |_, _, t, v| {
            t.reduce(v[0], Reduction::AbsMean, &[0, 1])
        }),
        "add" => plain(vec![u(rng, &[3, 4]), u(rng, &[3, 4])], |_, _, t, v| t.add(v[0], v[1])),
        "sub" => plain(vec![u(rng, &[3, 4]), u(rng, &[3, 4])], |_, _, t, v| t.sub(v[0], v[1])),
        "mul" => plain(vec![u(rng, &[3, 4]), u(rng, &[3, 4])], |_, _, t, v| t.mul(v[0], v[1])),
        "add_broadcast" => plain(vec![u(rng, &[2, 3, 4]), u(rng, &[3, 4])], |_, _, t, v| {
            t.add_broadcast(v[0], v[1])
        }),
        "log" => plain(vec![uniform(rng, &[12], 0.2, 2.0)], |_, _, t, v| {
            Ok(t.log_clamped(v[0], 1e-12))
        }),
        "gather_rows" => plain(vec![u(rng, &[5, 3])], |_, _, t, v| {
            t.gather_rows(v[0], Arc::new(vec![4, 0, 0, 2, 4, 4, 1]))
        }),
        "loss_l1" => plain(vec![u(rng, &[2, 3, 4]), u(rng, &[2, 3, 4])], |_, _, t, v| {
            loss_l1(t, v[0], v[1])
        }),
        "loss_generator" => plain(
            vec![
                uniform(rng, &[1, 1, 3, 3], 0.1, 0.9),
                u(rng, &[1, 3, 4, 4]),
                u(rng, &[1, 3, 4, 4]),
            ],
            |_, _, t, v| Ok(loss_generator(t, v[0], v[1], v[2], 100.0)?.total),
        ),
        "loss_discriminator" => plain(
            vec![
                uniform(rng, &[1, 1, 3, 3], 0.1, 0.9),
                uniform(rng, &[1, 1, 3, 3], 0.1, 0.9),
            ],
            |_, _, t, v| loss_discriminator(t, v[0], v[1]),
        ),
        "window_partition_reverse" => plain(vec![u(rng, &[2, 4, 4, 3])], |_, _, t, v| {
            let w = window_partition(t, v[0], 2)?;
            let w = t.tanh(w);
            window_reverse(t, w, 2, 4, 4)
        }),
        "window_attention" => {
            let mut store = ParamStore::new();
            let block = SwinBlockParams::new(&mut store, rng, "b", 8, 2, 2, true, (4, 4))?;
            scramble(&mut store, rng, 0.3);
            Box::new(Case {
                inputs: vec![u(rng, &[4, 4, 8])],
                store,
                module: block,
                forward: |p, s, t, v| {
                    let mask = build_shift_mask(4, 4, 2, 1)?;
                    window_attention(t, s, v[0], p, Some(&mask))
                },
                reference: None,
            })
        }
        "swin_block" => {
            let mut store = ParamStore::new();
            let block = SwinBlockParams::new(&mut store, rng, "b", 8, 2, 2, true, (4, 4))?;
            scramble(&mut store, rng, 0.3);
            Box::new(Case {
                inputs: vec![u(rng, &[1, 16, 8])],
                store,
                module: block,
                forward: |p, s, t, v| swin_block(t, s, v[0], p, 4, 4),
                reference: None,
            })
        }
        "patch_embed" => {
            let mut store = ParamStore::new();
            let embed = PatchEmbed::new(&mut store, rng, "e", 4, 8);
            scramble(&mut store, rng, 0.3);
            Box::new(Case {
                inputs: vec![u(rng, &[1, 3, 8, 8])],
                store,
                module: embed,
                forward: |m, s, t, v| m.forward(t, s, v[0]),
                reference: None,
            })
        }
        "patch_merge" => {
            let mut store = ParamStore::new();
            let merge = PatchMerge::new(&mut store, rng, "m", 4);
            scramble(&mut store, rng, 0.3);
            Box::new(Case {
                inputs: vec![u(rng, &[1, 16, 4])],
                store,
                module: merge,
                forward: |m, s, t, v| m.forward(t, s, v[0], 4, 4),
                reference: None,
            })
        }
        "patch_expand" => {
            let mut store = ParamStore::new();
            let expand = PatchExpand::new(&mut store, rng, "x", 8)?;
            scramble(&mut store, rng, 0.3);
            Box::new(Case {
                inputs: vec![u(rng, &[1, 4, 8])],
                store,
                module: expand,
                forward: |m, s, t, v| m.forward(t, s, v[0], 2, 2),
                reference: None,
            })
        }
        "conv_block" => {
            let mut store = ParamStore::new();
            let block = ConvBlock::new(&mut store, rng, "c", 4);
            scramble(&mut store, rng, 0.3);
            Box::new(Case {
                inputs: vec![u(rng, &[2, 16, 4])],
                store,
                module: block,
                forward: |m, s, t, v| m.forward(t, s, v[0], 4, 4, true),
                reference: None,
            })
        }
        "discriminator" => {
            let d = Discriminator::build(rng.random());
            Box::new(Case {
                inputs: vec![u(rng, &[1, 6, 32, 32])],
                store: d.params,
                module: d.layers,
                forward: |layers, s, t, v| forward_layers(layers, s, t, v[0], true),
                reference: None,
            })
        }
        other => {
            return Err(Error::Lookup {
                kind: "differentiable op",
                name: other.to_owned(),
            })
        }
    })
}

/// Train-mode forward of the discriminator stack.
fn discriminator_f64(layers: &Vec<ConvLayer>, inputs: &[Buf64], params: &[Buf64]) -> Vec<f64> {
    let mut h = inputs[0].clone();
    for layer in layers {
        let bias = layer.bias.map(|b| params[b.index()].data.as_slice());
        h = conv2d_f64(&h, &params[layer.weight.index()], bias, layer.stride, PADDING);
        match &layer.norm {
            Some(bn) => {
                let (g, b) = (&params[bn.gamma.index()].data, &params[bn.beta.index()].data);
                batch_norm_f64(&mut h, g, b, bn.stats.eps as f64);
                let slope = LEAKY_SLOPE as f64;
                h.data.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v *= slope);
            }
            None => h.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
    }
    h.data
}

fn conv2d_f64(x: &Buf64, w: &Buf64, bias: Option<&[f64]>, stride: usize, pad: usize) -> Buf64 {
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * oh * ow..][..oh * ow];
            dst.fill(bias.map_or(0.0, |bs| bs[o]));
            for i in 0..ci {
                let src = &x.data[(b * ci + i) * h * wd..][..h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h) else {
                                continue;
                            };
                            for ox in 0..ow {
                                if let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd) {
                                    dst[oy * ow + ox] += wv * src[iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Buf64 {
        shape: vec![n, co, oh, ow],
        data: out,
    }
}

/// Normalizes with batch statistics (biased variance).
fn batch_norm_f64(x: &mut Buf64, gamma: &[f64], beta: &[f64], eps: f64) {
    let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let count = (n * hw) as f64;
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
        let mean = idx().map(|i| x.data[i]).sum::<f64>() / count;
        let var = idx().map(|i| (x.data[i] - mean).powi(2)).sum::<f64>() / count;
        let scale = gamma[ch] / (var + eps).sqrt();
        for i in idx() {
            x.data[i] = (x.data[i] - mean) * scale + beta[ch];
        }
    }
}

/// Finite-difference check of a registered op at one seed.
pub fn gradcheck(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = build(op, &mut rng)?;
    let err = case.run(seed)?;
    let tol = tolerance(op);
    Ok(GradCheckReport {
        op: op.to_owned(),
        max_rel_error: err,
        tolerance: tol,
        passed: err <= tol,
    })
}

/// Train-mode discriminator gradients on a `1 x 6 x size x size` pair against
/// finite differences of an independent f64 forward with step `eps`.
pub fn discriminator_reference_check(seed: u64, size: usize, eps: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Discriminator::build(rng.random());
    let mut case = Case {
        inputs: vec![uniform(&mut rng, &[1, 6, size, size], -1.0, 1.0)],
        store: d.params,
        module: d.layers,
        forward: |layers, s, t, v| forward_layers(layers, s, t, v[0], true),
        reference: Some((discriminator_f64 as Reference<Vec<ConvLayer>>, eps)),
    };
    let err = case.run(seed)?;
    Ok(GradCheckReport {
        op: "discriminator_f64_reference".to_owned(),
        max_rel_error: err,
        tolerance,
        passed: err <= tolerance,
    })
}

/// Finite-difference check of an arbitrary parameter-free function.
pub fn check_fn(
    name: &str,
    inputs: Vec<Tensor>,
    tolerance: f64,
    seed: u64,
    f: fn(&mut (), &ParamStore, &mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let err = plain(inputs, f).run(seed)?;
    Ok(GradCheckReport {
        op: name.to_owned(),
        max_rel_error: err,
        tolerance,
        passed: err <= tolerance,
    })
}
