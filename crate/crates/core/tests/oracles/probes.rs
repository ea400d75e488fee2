//! Comparisons of the windowed attention against the dense oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinpg::params::{uniform, ParamStore};
use swinpg::swin::{build_shift_mask, window_attention, window_partition, SwinBlockParams};
use swinpg::tensor::{Tape, Tensor};

use super::{dense_attention, AttnWeights};

pub fn block(
    store: &mut ParamStore,
    seed: u64,
    dim: usize,
    heads: usize,
    window: usize,
    shifted: bool,
    res: usize,
) -> SwinBlockParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SwinBlockParams::new(store, &mut rng, "b", dim, heads, window, shifted, (res, res)).unwrap()
}

/// Redraw every attention weight uniformly so the oracle sees non-trivial values.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng, zero_table: Option<&SwinBlockParams>) {
    for p in store.iter_mut() {
        if !p.name.contains("norm") {
            p.value = uniform(rng, p.value.shape(), -0.5, 0.5);
        }
    }
    if let Some(b) = zero_table {
        let shape = store.get(b.bias_table).value.shape().to_vec();
        store.set_value(b.bias_table, Tensor::zeros(shape)).unwrap();
    }
}

/// Whether the token at rolled coordinate `p` wrapped around the edge.
pub fn wrapped(p: usize, len: usize, shift: usize) -> bool {
    p >= len - shift
}

/// Shifted-window attention on a rolled `h x h` grid, checked window by
/// window against attention restricted to each contiguous region.
pub fn masked_vs_regions(h: usize, m: usize, shift: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, heads) = (8, 2);
    let mut store = ParamStore::new();
    let b = block(&mut store, seed, dim, heads, m, true, h);
    randomize(&mut store, &mut rng, None);
    let grid = uniform(&mut rng, &[1, h, h, dim], -1.0, 1.0);
    let mask = build_shift_mask(h, h, m, shift).unwrap();
    let mut t = Tape::new();
    let x = t.constant(grid.clone());
    let windows = window_partition(&mut t, x, m).unwrap();
    let out = window_attention(&mut t, &store, windows, &b, Some(&mask)).unwrap();
    let got = t.value(out).data().to_vec();

    let w = AttnWeights::from_block(&store, &b);
    let per_row = h / m;
    let mut worst = 0.0f64;
    for win in 0..per_row * per_row {
        let coords: Vec<(usize, usize)> = (0..m * m)
            .map(|t| ((win / per_row) * m + t / m, (win % per_row) * m + t % m))
            .collect();
        let tokens: Vec<Vec<f64>> = coords
            .iter()
            .map(|&(y, x)| {
                grid.data()[(y * h + x) * dim..][..dim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect();
        let pos: Vec<(usize, usize)> = (0..m * m).map(|t| (t / m, t % m)).collect();
        let region = |i: usize| (wrapped(coords[i].0, h, shift), wrapped(coords[i].1, h, shift));
        let want = dense_attention(&w, &tokens, &pos, &|i, j| region(i) == region(j));
        for (ti, row) in want.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                worst = worst.max((got[(win * m * m + ti) * dim + d] as f64 - v).abs());
            }
        }
    }
    worst
}

/// Largest deviation of single-window attention (zero bias table, no mask)
/// from dense attention over the same tokens.
pub fn global_vs_dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (m, dim, heads) = (4, 12, 3);
    let mut store = ParamStore::new();
    let b = block(&mut store, seed, dim, heads, m, false, m);
    randomize(&mut store, &mut rng, Some(&b));
    let x = uniform(&mut rng, &[1, m * m, dim], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let out = window_attention(&mut t, &store, v, &b, None).unwrap();
    let tokens: Vec<Vec<f64>> = x
        .data()
        .chunks(dim)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    let pos: Vec<(usize, usize)> = (0..m * m).map(|i| (i / m, i % m)).collect();
    let want = dense_attention(&AttnWeights::from_block(&store, &b), &tokens, &pos, &|_, _| true);
    t.value(out)
        .data()
        .iter()
        .zip(want.iter().flatten())
        .map(|(&a, b)| (a as f64 - b).abs())
        .fold(0.0, f64::max)
}
