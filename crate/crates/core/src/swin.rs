//! Shifted-window transformer machinery: window partitioning, relative
//! position bias, shift masks, windowed attention, the Swin block itself and
//! the patch embed / merge / expand layers that move between resolutions.

use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Logit added between tokens from different pre-shift regions.
pub const MASK_VALUE: f32 = -100.0;

pub const MLP_RATIO: usize = 4;

/// Tiling of an `H x W` token grid into `M x M` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub num_windows: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(dim_err!(
                "{}x{} grid is not divisible into {}x{} windows",
                height,
                width,
                window,
                window
            ));
        }
        Ok(WindowGrid {
            height,
            width,
            window,
            num_windows: (height / window) * (width / window),
        })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// `[n, H, W, C]` to `[n * num_windows, M*M, C]`, windows in row-major order.
pub fn window_partition(tape: &mut Tape, x: Var, window: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(dim_err!("window_partition expects [n, H, W, C], got {:?}", shape));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let grid = WindowGrid::new(h, w, window)?;
    let m = window;
    let t = tape.reshape(x, &[n, h / m, m, w / m, m, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[n * grid.num_windows, m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, window: usize, height: usize, width: usize) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let grid = WindowGrid::new(height, width, window)?;
    let m = window;
    if shape.len() != 3 || shape[1] != m * m || !shape[0].is_multiple_of(grid.num_windows) {
        return Err(dim_err!(
            "{:?} is not a set of {}x{} windows over a {}x{} grid",
            shape,
            m,
            m,
            height,
            width
        ));
    }
    let (n, c) = (shape[0] / grid.num_windows, shape[2]);
    let t = tape.reshape(windows, &[n, height / m, width / m, m, m, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[n, height, width, c])
}

/// Bias-table row for every ordered token pair inside an `M x M` window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativeIndex {
    pub window: usize,
    /// Row-major `[M*M, M*M]`.
    pub index: Arc<Vec<usize>>,
}

impl RelativeIndex {
    pub fn table_rows(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.index[i * self.window * self.window + j]
    }
}

pub fn build_relative_index(window: usize) -> Result<RelativeIndex> {
    if window < 1 {
        return Err(Error::Contract("window size must be at least 1".into()));
    }
    let m = window as isize;
    let n = window * window;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n as isize {
        for j in 0..n as isize {
            let d_row = i / m - j / m;
            let d_col = i % m - j % m;
            index.push(((d_row + m - 1) * (2 * m - 1) + (d_col + m - 1)) as usize);
        }
    }
    Ok(RelativeIndex {
        window,
        index: Arc::new(index),
    })
}

/// Additive attention mask for shifted windows: `[num_windows, M*M, M*M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMask {
    pub mask: Tensor,
}

impl ShiftMask {
    pub fn num_windows(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn is_zero(&self) -> bool {
        self.mask.data().iter().all(|&v| v == 0.0)
    }
}

pub fn build_shift_mask(height: usize, width: usize, window: usize, shift: usize) -> Result<ShiftMask> {
    if shift >= window {
        return Err(Error::Contract(format!(
            "shift {} must be smaller than the window size {}",
            shift, window
        )));
    }
    let grid = WindowGrid::new(height, width, window)?;
    let n = grid.tokens_per_window();
    let mut mask = vec![0.0f32; grid.num_windows * n * n];
    if shift > 0 {
        // region labels of the rolled grid: three bands per axis
        let band = |pos: usize, len: usize| -> usize {
            if pos < len - window {
                0
            } else if pos < len - shift {
                1
            } else {
                2
            }
        };
        let mut labels = vec![0usize; height * width];
        for y in 0..height {
            for x in 0..width {
                labels[y * width + x] = band(y, height) * 3 + band(x, width);
            }
        }
        let per_row = width / window;
        for win in 0..grid.num_windows {
            let (wy, wx) = (win / per_row, win % per_row);
            let label = |t: usize| {
                let y = wy * window + t / window;
                let x = wx * window + t % window;
                labels[y * width + x]
            };
            for i in 0..n {
                for j in 0..n {
                    if label(i) != label(j) {
                        mask[(win * n + i) * n + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Ok(ShiftMask {
        mask: Tensor::from_parts(vec![grid.num_windows, n, n], mask),
    })
}

/// Weights and static layout of one Swin transformer block.
#[derive(Clone, Debug)]
pub struct SwinBlockParams {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Cyclic shift applied before partitioning; zero for regular windows.
    pub shift: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub bias_table: ParamId,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub relative_index: RelativeIndex,
}

impl SwinBlockParams {
    /// A block for an `height x width` grid.
    ///
    /// Grids no larger than the window use a single unshifted window.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        resolution: (usize, usize),
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let (window, shift) = effective_window(window, shifted, resolution);
        WindowGrid::new(resolution.0, resolution.1, window).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        let relative_index = build_relative_index(window)?;
        let hidden = dim * MLP_RATIO;
        Ok(SwinBlockParams {
            dim,
            heads,
            window,
            shift,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), dim, 3 * dim, true),
            bias_table: store.add(
                format!("{name}.attn.relative_bias"),
                trunc_normal(rng, &[relative_index.table_rows(), heads], 0.02),
            ),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), dim, dim, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim, true),
            relative_index,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Window size and shift actually used on a grid of `resolution`.
pub fn effective_window(window: usize, shifted: bool, resolution: (usize, usize)) -> (usize, usize) {
    let smallest = resolution.0.min(resolution.1);
    if smallest <= window {
        (smallest, 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// Multi-head self-attention inside each window, with relative position
/// bias and an optional shift mask. `x: [B_w, M*M, C]`.
pub fn window_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &SwinBlockParams,
    mask: Option<&ShiftMask>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n_tok = params.window * params.window;
    if shape.len() != 3 || shape[1] != n_tok || shape[2] != params.dim {
        return Err(dim_err!(
            "window_attention expects [B, {}, {}], got {:?}",
            n_tok,
            params.dim,
            shape
        ));
    }
    let b_w = shape[0];
    let (heads, hd) = (params.heads, params.head_dim());

    let qkv = params.qkv.forward(tape, store, x)?;
    let qkv = tape.reshape(qkv, &[b_w, n_tok, 3, heads, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let parts = tape.split(qkv, 0, &[1, 1, 1])?;
    let q = tape.reshape(parts[0], &[b_w, heads, n_tok, hd])?;
    let k = tape.reshape(parts[1], &[b_w, heads, n_tok, hd])?;
    let v = tape.reshape(parts[2], &[b_w, heads, n_tok, hd])?;

    let q = tape.scale(q, 1.0 / (hd as f32).sqrt());
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let mut logits = tape.matmul(q, kt)?;

    let table = tape.param(store, params.bias_table);
    let bias = tape.gather_rows(table, Arc::clone(&params.relative_index.index))?;
    let bias = tape.permute(bias, &[1, 0])?;
    let bias = tape.reshape(bias, &[heads, n_tok, n_tok])?;
    logits = tape.add_broadcast(logits, bias)?;

    if let Some(mask) = mask {
        let n_win = mask.num_windows();
        if mask.mask.shape() != [n_win, n_tok, n_tok] || !b_w.is_multiple_of(n_win) {
            return Err(dim_err!(
                "shift mask {:?} does not fit {} windows of {} tokens",
                mask.mask.shape(),
                b_w,
                n_tok
            ));
        }
        let expanded = expand_mask(&mask.mask, heads);
        let m = tape.constant(expanded);
        let grouped = tape.reshape(logits, &[b_w / n_win, n_win, heads, n_tok, n_tok])?;
        let grouped = tape.add_broadcast(grouped, m)?;
        logits = tape.reshape(grouped, &[b_w, heads, n_tok, n_tok])?;
    }

    let attn = tape.softmax(logits, -1)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b_w, n_tok, params.dim])?;
    params.proj.forward(tape, store, out)
}

/// `[W, N, N]` to `[W, heads, N, N]` by repetition.
fn expand_mask(mask: &Tensor, heads: usize) -> Tensor {
    let s = mask.shape();
    let (w, nn) = (s[0], s[1] * s[2]);
    let mut data = Vec::with_capacity(w * heads * nn);
    for win in mask.data().chunks_exact(nn) {
        for _ in 0..heads {
            data.extend_from_slice(win);
        }
    }
    Tensor::from_parts(vec![w, heads, s[1], s[2]], data)
}

/// One transformer block over `[n, H*W, C]` tokens.
///
/// `x + attn(norm(x))` with cyclic shift and mask when `params.shift > 0`,
/// followed by `x + mlp(norm(x))`.
pub fn swin_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &SwinBlockParams,
    height: usize,
    width: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != height * width || shape[2] != params.dim {
        return Err(dim_err!(
            "swin block over {}x{}x{} got tokens {:?}",
            height,
            width,
            params.dim,
            shape
        ));
    }
    let (n, c, m) = (shape[0], params.dim, params.window);
    WindowGrid::new(height, width, m)?;
    let s = params.shift as isize;

    let h = params.norm1.forward(tape, store, x)?;
    let mut h = tape.reshape(h, &[n, height, width, c])?;
    let mask = if s > 0 {
        h = tape.roll(h, -s, -s)?;
        Some(build_shift_mask(height, width, m, params.shift)?)
    } else {
        None
    };
    let windows = window_partition(tape, h, m)?;
    let attended = window_attention(tape, store, windows, params, mask.as_ref())?;
    let mut h = window_reverse(tape, attended, m, height, width)?;
    if s > 0 {
        h = tape.roll(h, s, s)?;
    }
    let h = tape.reshape(h, &[n, height * width, c])?;
    let x = tape.add(x, h)?;

    let h = params.norm2.forward(tape, store, x)?;
    let h = params.fc1.forward(tape, store, h)?;
    let h = tape.gelu(h);
    let h = params.fc2.forward(tape, store, h)?;
    tape.add(x, h)
}

/// Non-overlapping `patch x patch` RGB patches, linearly embedded and normalized.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub dim: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, patch: usize, dim: usize) -> Self {
        PatchEmbed {
            patch,
            dim,
            proj: Linear::new(store, rng, &format!("{name}.proj"), 3 * patch * patch, dim, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    /// `[n, 3, H, W]` to `[n, (H/p)*(W/p), C]`; patch values flattened in
    /// (channel, row, column) order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let tokens = self.flatten(tape, x)?;
        let t = self.proj.forward(tape, store, tokens)?;
        self.norm.forward(tape, store, t)
    }

    pub fn flatten(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let p = self.patch;
        if shape.len() != 4 || shape[1] != 3 || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
            return Err(dim_err!(
                "patch embedding needs [n, 3, H, W] with H, W divisible by {}, got {:?}",
                p,
                shape
            ));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let t = tape.reshape(x, &[n, 3, h / p, p, w / p, p])?;
        let t = tape.permute(t, &[0, 2, 4, 1, 3, 5])?;
        tape.reshape(t, &[n, (h / p) * (w / p), 3 * p * p])
    }
}

/// 2x2 neighbourhood concatenation, norm and projection `4C -> 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        PatchMerge {
            dim,
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, height: usize, width: usize) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let c = self.dim;
        if shape.len() != 3
            || shape[1] != height * width
            || shape[2] != c
            || !height.is_multiple_of(2)
            || !width.is_multiple_of(2)
        {
            return Err(dim_err!(
                "patch merge over an even {}x{}x{} grid got {:?}",
                height,
                width,
                c,
                shape
            ));
        }
        let n = shape[0];
        let t = tape.reshape(x, &[n, height / 2, 2, width / 2, 2, c])?;
        // (row offset, col offset) ordered (0,0), (1,0), (0,1), (1,1)
        let t = tape.permute(t, &[0, 1, 3, 4, 2, 5])?;
        let t = tape.reshape(t, &[n, height * width / 4, 4 * c])?;
        let t = self.norm.forward(tape, store, t)?;
        self.reduction.forward(tape, store, t)
    }
}

/// Linear projection `C -> f*f*C_out` rearranged into `f x f` spatial blocks.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub dim: usize,
    pub out_dim: usize,
    pub factor: usize,
    pub expand: Linear,
}

impl PatchExpand {
    /// The 2x expansion between decoder stages: `C -> C/2` channels.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(dim_err!("patch expand needs an even channel count, got {}", dim));
        }
        Ok(Self::with_factor(store, rng, name, dim, dim / 2, 2))
    }

    pub fn with_factor(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        out_dim: usize,
        factor: usize,
    ) -> Self {
        PatchExpand {
            dim,
            out_dim,
            factor,
            expand: Linear::new(
                store,
                rng,
                &format!("{name}.expand"),
                dim,
                factor * factor * out_dim,
                false,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, height: usize, width: usize) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != height * width || shape[2] != self.dim {
            return Err(dim_err!(
                "patch expand over {}x{}x{} got {:?}",
                height,
                width,
                self.dim,
                shape
            ));
        }
        let (n, f, c) = (shape[0], self.factor, self.out_dim);
        let t = self.expand.forward(tape, store, x)?;
        let t = tape.reshape(t, &[n, height, width, f, f, c])?;
        let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(t, &[n, height * f * width * f, c])
    }
}
