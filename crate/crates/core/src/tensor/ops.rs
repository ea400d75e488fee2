//! Differentiable operators: forward evaluation on [`Tape`] plus the matching
//! vector-Jacobian products.

use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::tape::{accumulate, Tape, Var};
use super::{normalize_axis, numel, strides, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    AbsMean,
}

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Paired,
    SharedA,
    SharedB,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    mode: Broadcast,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: MatMulDims,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddSuffix {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f32,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    LogClamp {
        x: Var,
        min: f32,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f32>,
    },
    Roll {
        x: Var,
        shift_h: isize,
        shift_w: isize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reduce {
        x: Var,
        kind: Reduction,
        axes: Vec<usize>,
    },
    Gather {
        table: Var,
        index: Arc<Vec<usize>>,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::AddSuffix { a, b } => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Act { x, .. }
            | Op::LogClamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Roll { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Reduce { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { table, .. } => vec![*table],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddSuffix { .. } => "add_broadcast",
            Op::Affine { .. } => "affine",
            Op::Act { .. } => "activation",
            Op::LogClamp { .. } => "log",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Roll { .. } => "roll",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reduce { .. } => "reduce",
            Op::Gather { .. } => "gather",
        }
    }

    /// Push the vector-Jacobian product of this op into its inputs' slots.
    pub fn backward(&self, tape: &Tape, out: &Tensor, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let need = |v: Var| tape.requires_grad(v);
        let val = |v: Var| tape.value(v).data();
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let MatMulDims { batch, m, k, n, mode } = *dims;
                let (ad, bd) = (val(*a), val(*b));
                match mode {
                    Broadcast::SharedB => {
                        let rows = batch * m;
                        if need(*a) {
                            let mut ga = vec![0.0; rows * k];
                            kernels::gemm(rows, n, k, dy, false, bd, true, &mut ga, false);
                            accumulate(grads, *a, ga);
                        }
                        if need(*b) {
                            let mut gb = vec![0.0; k * n];
                            kernels::gemm(k, rows, n, ad, true, dy, false, &mut gb, false);
                            accumulate(grads, *b, gb);
                        }
                    }
                    Broadcast::Paired | Broadcast::SharedA => {
                        let shared_a = matches!(mode, Broadcast::SharedA);
                        if need(*a) {
                            let len = if shared_a { m * k } else { batch * m * k };
                            let mut ga = vec![0.0; len];
                            for i in 0..batch {
                                let dst = if shared_a { 0 } else { i * m * k };
                                kernels::gemm(
                                    m,
                                    n,
                                    k,
                                    &dy[i * m * n..],
                                    false,
                                    &bd[i * k * n..],
                                    true,
                                    &mut ga[dst..dst + m * k],
                                    shared_a,
                                );
                            }
                            accumulate(grads, *a, ga);
                        }
                        if need(*b) {
                            let mut gb = vec![0.0; batch * k * n];
                            for i in 0..batch {
                                let src = if shared_a { 0 } else { i * m * k };
                                kernels::gemm(
                                    k,
                                    m,
                                    n,
                                    &ad[src..],
                                    true,
                                    &dy[i * m * n..],
                                    false,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                    false,
                                );
                            }
                            accumulate(grads, *b, gb);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if need(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if need(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if need(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if need(*b) {
                    accumulate(grads, *b, dy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    let g = dy.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, g);
                }
                if need(*b) {
                    let g = dy.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, g);
                }
            }
            Op::AddSuffix { a, b } => {
                if need(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if need(*b) {
                    let len = tape.value(*b).numel();
                    let mut gb = vec![0.0; len];
                    for chunk in dy.chunks_exact(len) {
                        for (acc, g) in gb.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Affine { x, scale } => {
                accumulate(grads, *x, dy.iter().map(|g| g * scale).collect());
            }
            Op::Act { x, kind } => {
                let xs = val(*x);
                let ys = out.data();
                let g: Vec<f32> = match *kind {
                    Activation::Gelu => dy.iter().zip(xs).map(|(g, &x)| g * gelu_grad(x)).collect(),
                    Activation::LeakyRelu(slope) => dy
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect(),
                    Activation::Tanh => dy.iter().zip(ys).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => dy.iter().zip(ys).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                accumulate(grads, *x, g);
            }
            Op::LogClamp { x, min } => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > *min { g / x } else { 0.0 })
                    .collect();
                accumulate(grads, *x, g);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_extents(out.shape(), *axis);
                let ys = out.data();
                let mut g = vec![0.0; ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += dy[idx] * ys[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            g[idx] = ys[idx] * (dy[idx] - dot);
                        }
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xs = val(*x);
                let gam = val(*gamma);
                let d = gam.len();
                let mut gx = vec![0.0; xs.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (row, ((xr, dyr), gxr)) in xs
                    .chunks_exact(d)
                    .zip(dy.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let (mu, rs) = (mean[row], rstd[row]);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let xh = (xr[j] - mu) * rs;
                        let dxh = dyr[j] * gam[j];
                        gg[j] += dyr[j] * xh;
                        gb[j] += dyr[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let inv_d = 1.0 / d as f32;
                    for j in 0..d {
                        let xh = (xr[j] - mu) * rs;
                        let dxh = dyr[j] * gam[j];
                        gxr[j] = rs * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh);
                    }
                }
                if need(*x) {
                    accumulate(grads, *x, gx);
                }
                if need(*gamma) {
                    accumulate(grads, *gamma, gg);
                }
                if need(*beta) {
                    accumulate(grads, *beta, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            } => {
                let xs = val(*x);
                let shape = tape.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let hw = shape[2] * shape[3];
                let count = (n * hw) as f32;
                let gam = val(*gamma);
                let mut gx = vec![0.0; xs.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let (mu, rs) = (mean[ch], rstd[ch]);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (xs[i] - mu) * rs;
                            sum_dy += dy[i];
                            sum_dy_xh += dy[i] * xh;
                        }
                    }
                    gg[ch] = sum_dy_xh;
                    gb[ch] = sum_dy;
                    let scale = gam[ch] * rs;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            gx[i] = if *batch_stats {
                                let xh = (xs[i] - mu) * rs;
                                scale * (dy[i] - sum_dy / count - xh * sum_dy_xh / count)
                            } else {
                                scale * dy[i]
                            };
                        }
                    }
                }
                if need(*x) {
                    accumulate(grads, *x, gx);
                }
                if need(*gamma) {
                    accumulate(grads, *gamma, gg);
                }
                if need(*beta) {
                    accumulate(grads, *beta, gb);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let c_out = tape.shape(*w)[0];
                let n = tape.shape(*x)[0];
                let (rows, p) = (geom.rows(), geom.cols());
                if need(*w) {
                    let mut gw = vec![0.0; c_out * rows];
                    for i in 0..n {
                        kernels::gemm(
                            c_out,
                            p,
                            rows,
                            &dy[i * c_out * p..],
                            false,
                            &cols[i * rows * p..],
                            true,
                            &mut gw,
                            true,
                        );
                    }
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut gb = vec![0.0; c_out];
                        for (j, chunk) in dy.chunks_exact(p).enumerate() {
                            gb[j % c_out] += chunk.iter().sum::<f32>();
                        }
                        accumulate(grads, *b, gb);
                    }
                }
                if need(*x) {
                    let image = geom.c_in * geom.h * geom.w;
                    let mut gx = vec![0.0; n * image];
                    let mut dcols = vec![0.0; rows * p];
                    let wd = val(*w);
                    for i in 0..n {
                        kernels::gemm(rows, c_out, p, wd, true, &dy[i * c_out * p..], false, &mut dcols, false);
                        kernels::col2im(&dcols, geom, &mut gx[i * image..(i + 1) * image]);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Roll { x, shift_h, shift_w } => {
                let g = kernels::roll_nhwc(dy, out.shape(), -shift_h, -shift_w);
                accumulate(grads, *x, g);
            }
            Op::Reshape { x } => accumulate(grads, *x, dy.to_vec()),
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_permutation(axes);
                accumulate(grads, *x, kernels::permute(dy, out.shape(), &inv));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = tape.shape(*v)[*axis];
                    if need(*v) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&dy[start..start + len * inner]);
                        }
                        accumulate(grads, *v, g);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = tape.shape(*x);
                let (outer, total, inner) = kernels::axis_extents(src_shape, *axis);
                let len = out.shape()[*axis];
                let mut g = vec![0.0; numel(src_shape)];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, g);
            }
            Op::Reduce { x, kind, axes } => {
                let xs = val(*x);
                let map = ReduceMap::new(tape.shape(*x), axes);
                let count = map.count as f32;
                let mut g = vec![0.0; xs.len()];
                map.for_each(|src, dst| {
                    g[src] = match kind {
                        Reduction::Sum => dy[dst],
                        Reduction::Mean => dy[dst] / count,
                        Reduction::AbsMean => {
                            let s = if xs[src] > 0.0 {
                                1.0
                            } else if xs[src] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            s * dy[dst] / count
                        }
                    };
                });
                accumulate(grads, *x, g);
            }
            Op::Gather { table, index } => {
                let width = tape.shape(*table)[1];
                let mut g = vec![0.0; tape.value(*table).numel()];
                for (row, &src) in index.iter().enumerate() {
                    for j in 0..width {
                        g[src * width + j] += dy[row * width + j];
                    }
                }
                accumulate(grads, *table, g);
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps every input position of a reduction to its output position.
struct ReduceMap {
    shape: Vec<usize>,
    out_step: Vec<usize>,
    count: usize,
    out_shape: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out_strides = strides(&out_shape);
        let mut out_step = Vec::with_capacity(shape.len());
        let mut kept = 0;
        for i in 0..shape.len() {
            if axes.contains(&i) {
                out_step.push(0);
            } else {
                out_step.push(out_strides[kept]);
                kept += 1;
            }
        }
        let count = axes.iter().map(|&a| shape[a]).product();
        ReduceMap {
            shape: shape.to_vec(),
            out_step,
            count,
            out_shape,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total = numel(&self.shape);
        if total == 0 {
            return;
        }
        let ndim = self.shape.len();
        let mut index = vec![0usize; ndim];
        let mut dst = 0usize;
        for src in 0..total {
            f(src, dst);
            let mut axis = ndim;
            while axis > 0 {
                axis -= 1;
                index[axis] += 1;
                dst += self.out_step[axis];
                if index[axis] < self.shape[axis] {
                    break;
                }
                dst -= self.out_step[axis] * self.shape[axis];
                index[axis] = 0;
            }
        }
    }
}

impl Tape {
    /// Batched matrix product `[.., m, k] · [.., k, n]`.
    ///
    /// Batch dimensions must match exactly, or one operand may be a plain
    /// matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {:?} and {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions differ: {:?} · {:?}", sa, sb));
        }
        let (mode, batch_shape) = if batch_b.is_empty() {
            (Broadcast::SharedB, batch_a.to_vec())
        } else if batch_a.is_empty() {
            (Broadcast::SharedA, batch_b.to_vec())
        } else if batch_a == batch_b {
            (Broadcast::Paired, batch_a.to_vec())
        } else {
            return Err(dim_err!("matmul batch dimensions differ: {:?} · {:?}", sa, sb));
        };
        let batch = numel(&batch_shape);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        match mode {
            Broadcast::SharedB => kernels::gemm(batch * m, k, n, ad, false, bd, false, &mut out, false),
            Broadcast::Paired | Broadcast::SharedA => {
                for i in 0..batch {
                    let a_off = if matches!(mode, Broadcast::SharedA) {
                        0
                    } else {
                        i * m * k
                    };
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &ad[a_off..],
                        false,
                        &bd[i * k * n..],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let dims = MatMulDims { batch, m, k, n, mode };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, dims }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{} needs equal shapes, got {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// `a + b` where `b`'s shape equals a trailing part of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("cannot broadcast {:?} onto {:?}", sb, sa));
        }
        let bd = self.value(b).data();
        let len = bd.len().max(1);
        let data = self
            .value(a)
            .data()
            .chunks_exact(len)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push(t, Op::AddSuffix { a, b }))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| scale * e + shift).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let v = self.value(x);
        let f: Box<dyn Fn(f32) -> f32> = match kind {
            Activation::Gelu => Box::new(gelu),
            Activation::LeakyRelu(slope) => Box::new(move |x| if x > 0.0 { x } else { slope * x }),
            Activation::Tanh => Box::new(f32::tanh),
            Activation::Sigmoid => Box::new(sigmoid),
        };
        let data = v.data().iter().map(|&e| f(e)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::Act { x, kind })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(Activation::Gelu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.activation(Activation::LeakyRelu(slope), x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    /// `ln(max(x, min))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, min: f32) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(min).ln()).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::LogClamp { x, min })
    }

    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        let (outer, len, inner) = kernels::axis_extents(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xs[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xs[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    /// Normalize over the last dimension, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!(
                "layer_norm over {} features got gamma {:?} and beta {:?}",
                d,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d.max(1);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xs.len()];
        for (xr, or) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = xr.iter().sum::<f32>() / d as f32;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                or[j] = (xr[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    /// Batch normalization of `[n, c, h, w]` over `(n, h, w)`.
    ///
    /// In train mode the batch statistics normalize and are folded into
    /// `stats`; otherwise the running statistics in `stats` are used as is.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, train: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("batch_norm expects [n, c, h, w], got {:?}", shape));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(dim_err!(
                "batch_norm over {} channels got gamma {:?}, beta {:?}, {} running entries",
                c,
                self.shape(gamma),
                self.shape(beta),
                stats.mean.len()
            ));
        }
        let count = n * hw;
        if train && count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batch norm on {:?} sees {} value per channel",
                shape, count
            )));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut rstd = vec![0.0; c];
        for ch in 0..c {
            let (mu, var) = if train {
                let mut sum = 0.0f32;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sum += xs[off..off + hw].iter().sum::<f32>();
                }
                let mu = sum / count as f32;
                let mut sq = 0.0f32;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sq += xs[off..off + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f32>();
                }
                let var = sq / count as f32;
                let m = stats.momentum;
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mu;
                let unbiased = var * count as f32 / (count - 1) as f32;
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * unbiased;
                (mu, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            mean[ch] = mu;
            rstd[ch] = 1.0 / (var + stats.eps).sqrt();
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = g[ch] * rstd[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for i in off..off + hw {
                    out[i] = xs[i] * scale + shift;
                }
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats: train,
            },
        ))
    }

    /// 2-d cross-correlation of `[n, c_in, h, w]` with `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(dim_err!(
                "conv2d expects 4-d input and weight, got {:?} and {:?}",
                sx,
                sw
            ));
        }
        let (n, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, wc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wc != c_in {
            return Err(dim_err!("conv2d weight {:?} does not accept input {:?}", sw, sx));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err!(
                "conv2d kernel {}x{} larger than padded input {}x{} (input {:?})",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding,
                sx
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("conv2d bias {:?} for {} filters", self.shape(b), c_out));
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (geom.rows(), geom.cols());
        let xs = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut cols = vec![0.0; n * rows * p];
        let mut out = vec![0.0; n * c_out * p];
        let image = c_in * h * w;
        for i in 0..n {
            let cols_i = &mut cols[i * rows * p..(i + 1) * rows * p];
            kernels::im2col(&xs[i * image..(i + 1) * image], &geom, cols_i);
            let out_i = &mut out[i * c_out * p..(i + 1) * c_out * p];
            if let Some(bd) = bd {
                for (co, chunk) in out_i.chunks_exact_mut(p).enumerate() {
                    chunk.fill(bd[co]);
                }
            }
            kernels::gemm(c_out, rows, p, wd, false, cols_i, false, out_i, bd.is_some());
        }
        let t = Tensor::from_parts(vec![n, c_out, geom.out_h, geom.out_w], out);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
                cols,
            },
        ))
    }

    /// Cyclic shift of `[n, h, w, c]` along height and width.
    pub fn roll(&mut self, x: Var, shift_h: isize, shift_w: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("roll expects [n, h, w, c], got {:?}", shape));
        }
        let data = kernels::roll_nhwc(self.value(x).data(), &shape, shift_h, shift_w);
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(t, Op::Roll { x, shift_h, shift_w }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err!("{:?} is not a permutation of the axes of {:?}", axes, shape));
        }
        let data = kernels::permute(self.value(x).data(), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: isize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| dim_err!("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        let axis = normalize_axis(axis, base.len())?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("cannot concat {:?} with {:?} on axis {}", base, s, axis));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = normalize_axis(axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(dim_err!(
                "slice {}..{} out of range on axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let (outer, total, inner) = kernels::axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let xs = self.value(x).data();
        for o in 0..outer {
            let from = (o * total + start) * inner;
            data.extend_from_slice(&xs[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn split(&mut self, x: Var, axis: isize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        let resolved = normalize_axis(axis, shape.len())?;
        if sizes.iter().sum::<usize>() != shape[resolved] {
            return Err(dim_err!(
                "split sizes {:?} do not cover axis {} of {:?}",
                sizes,
                resolved,
                shape
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Reduce over `axes` (removed from the shape). An empty list copies `x`.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axes: &[isize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut resolved = axes
            .iter()
            .map(|&a| normalize_axis(a, shape.len()))
            .collect::<Result<Vec<_>>>()?;
        resolved.sort_unstable();
        resolved.dedup();
        let map = ReduceMap::new(&shape, &resolved);
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; numel(&map.out_shape)];
        map.for_each(|src, dst| {
            out[dst] += match kind {
                Reduction::AbsMean => xs[src].abs(),
                _ => xs[src],
            };
        });
        if kind != Reduction::Sum && map.count > 0 {
            let inv = 1.0 / map.count as f32;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::from_parts(map.out_shape.clone(), out);
        Ok(self.push(
            t,
            Op::Reduce {
                x,
                kind,
                axes: resolved,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[isize]) -> Result<Var> {
        self.reduce(x, Reduction::Sum, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[isize]) -> Result<Var> {
        self.reduce(x, Reduction::Mean, axes)
    }

    fn all_axes(&self, x: Var) -> Vec<isize> {
        (0..self.shape(x).len() as isize).collect()
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes = self.all_axes(x);
        self.reduce(x, Reduction::Sum, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes = self.all_axes(x);
        self.reduce(x, Reduction::Mean, &axes).expect("all axes are valid")
    }

    pub fn abs_mean_all(&mut self, x: Var) -> Var {
        let axes = self.all_axes(x);
        self.reduce(x, Reduction::AbsMean, &axes).expect("all axes are valid")
    }

    /// Rows of a `[rows, width]` table picked by `index`, giving `[index.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("gather_rows expects a 2-d table, got {:?}", shape));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("gather index {} out of range for {} rows", bad, rows));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            data.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let t = Tensor::from_parts(vec![index.len(), width], data);
        Ok(self.push(t, Op::Gather { table, index }))
    }
}
