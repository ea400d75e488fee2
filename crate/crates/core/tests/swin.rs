mod oracles;

use oracles::probes::{block, global_vs_dense, masked_vs_regions, randomize, wrapped};
use oracles::AttnWeights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swinpg::params::{uniform, ParamStore};
use swinpg::swin::{
    build_relative_index, build_shift_mask, swin_block, window_attention, window_partition, window_reverse, PatchEmbed,
    PatchExpand, PatchMerge, SwinBlockParams, WindowGrid, MASK_VALUE,
};
use swinpg::tensor::{Tape, Tensor};
use swinpg::Error;

#[test]
fn partition_shapes_and_counts() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([1, 8, 8, 3]));
    let w = window_partition(&mut t, x, 4).unwrap();
    assert_eq!(t.shape(w), &[4, 16, 3]);
    let x = t.constant(Tensor::zeros([2, 4, 4, 5]));
    let w = window_partition(&mut t, x, 4).unwrap();
    assert_eq!(t.shape(w), &[2, 16, 5]);
    assert_eq!(WindowGrid::new(224, 224, 7).unwrap().num_windows, 1024);
    let x = t.constant(Tensor::zeros([1, 6, 8, 3]));
    assert!(matches!(window_partition(&mut t, x, 4), Err(Error::Dimension(_))));
    let w = t.constant(Tensor::zeros([3, 16, 3]));
    assert!(matches!(window_reverse(&mut t, w, 4, 8, 8), Err(Error::Dimension(_))));
}

#[test]
fn partition_reverse_and_roll_are_bit_exact_inverses() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w, m) in [(8, 8, 4), (8, 8, 2), (4, 8, 4), (6, 6, 3), (4, 4, 4)] {
        let x = uniform(&mut rng, &[2, h, w, 3], -1.0, 1.0);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let p = window_partition(&mut t, v, m).unwrap();
        let r = window_reverse(&mut t, p, m, h, w).unwrap();
        assert_eq!(t.value(r), &x);
        let rolled = t.roll(v, -(m as isize) / 2, 3).unwrap();
        let back = t.roll(rolled, m as isize / 2, -3).unwrap();
        assert_eq!(t.value(back), &x);
    }
}

#[test]
fn relative_index_enumeration() {
    for m in [1usize, 2, 3, 7] {
        let idx = build_relative_index(m).unwrap();
        assert_eq!(idx.table_rows(), (2 * m - 1).pow(2));
        let span = 2 * m as isize - 1;
        let decode = |row: usize| {
            (
                row as isize / span - (m as isize - 1),
                row as isize % span - (m as isize - 1),
            )
        };
        for i in 0..m * m {
            for j in 0..m * m {
                let (dr, dc) = ((i / m) as isize - (j / m) as isize, (i % m) as isize - (j % m) as isize);
                assert!(idx.get(i, j) < idx.table_rows());
                assert_eq!(decode(idx.get(i, j)), (dr, dc));
                assert_eq!(decode(idx.get(j, i)), (-dr, -dc));
            }
        }
    }
    assert_eq!(*build_relative_index(1).unwrap().index, vec![0]);
    let two = build_relative_index(2).unwrap();
    let mut distinct = two.index.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(distinct.len(), 9);
    assert_eq!(build_relative_index(7).unwrap().table_rows(), 169);
    assert!(matches!(build_relative_index(0), Err(Error::Contract(_))));
}

#[test]
fn shift_mask_matches_brute_force_labels() {
    for (h, m, shift) in [(4, 2, 1), (8, 2, 1), (8, 4, 2), (6, 3, 1)] {
        let mask = build_shift_mask(h, h, m, shift).unwrap();
        let per_row = h / m;
        let n = m * m;
        for win in 0..mask.num_windows() {
            let coord = |t: usize| ((win / per_row) * m + t / m, (win % per_row) * m + t % m);
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (coord(i), coord(j));
                    let same = wrapped(a.0, h, shift) == wrapped(b.0, h, shift)
                        && wrapped(a.1, h, shift) == wrapped(b.1, h, shift);
                    let v = mask.mask.data()[(win * n + i) * n + j];
                    assert_eq!(v, if same { 0.0 } else { MASK_VALUE }, "h{h} m{m} win{win} {i},{j}");
                }
            }
        }
    }
    assert!(build_shift_mask(8, 8, 4, 0).unwrap().is_zero());
    assert!(matches!(build_shift_mask(8, 8, 4, 4), Err(Error::Contract(_))));
}

#[test]
fn masked_attention_equals_per_region_attention() {
    for (h, m, shift) in [(4, 2, 1), (8, 2, 1), (8, 4, 2)] {
        for seed in 0..3 {
            let err = masked_vs_regions(h, m, shift, seed);
            assert!(err <= 1e-5, "{h}x{h} M{m}: {err:e}");
        }
    }
}

#[test]
fn single_window_attention_equals_dense_attention() {
    for seed in 0..5 {
        let err = global_vs_dense(seed);
        assert!(err <= 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn single_token_window_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let b = block(&mut store, 4, 6, 2, 1, false, 1);
    randomize(&mut store, &mut rng, None);
    let x = uniform(&mut rng, &[3, 1, 6], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let out = window_attention(&mut t, &store, v, &b, None).unwrap();
    let w = AttnWeights::from_block(&store, &b);
    for (tok, got) in x.data().chunks(6).zip(t.value(out).data().chunks(6)) {
        let vals: Vec<f64> = (0..6)
            .map(|o| w.bqkv[12 + o] + (0..6).map(|i| tok[i] as f64 * w.wqkv[i * 18 + 12 + o]).sum::<f64>())
            .collect();
        for (o, g) in got.iter().enumerate() {
            let want = w.bproj[o] + (0..6).map(|i| vals[i] * w.wproj[i * 6 + o]).sum::<f64>();
            assert!((*g as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, dim) = (2, 4);
    let mut store = ParamStore::new();
    let b = block(&mut store, 5, dim, 1, m, false, m);
    randomize(&mut store, &mut rng, Some(&b));
    // zero query weights make every logit equal; identity output projection
    let mut wqkv = store.get(b.qkv.weight).value.clone();
    for i in 0..dim {
        for o in 0..dim {
            wqkv.data_mut()[i * 3 * dim + o] = 0.0;
        }
    }
    store.set_value(b.qkv.weight, wqkv).unwrap();
    store.set_value(b.qkv.bias.unwrap(), Tensor::zeros([3 * dim])).unwrap();
    let eye: Vec<f32> = (0..dim * dim)
        .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
        .collect();
    store
        .set_value(b.proj.weight, Tensor::new(vec![dim, dim], eye).unwrap())
        .unwrap();
    store.set_value(b.proj.bias.unwrap(), Tensor::zeros([dim])).unwrap();

    let x = uniform(&mut rng, &[1, m * m, dim], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let out = window_attention(&mut t, &store, v, &b, None).unwrap();
    let w = store.get(b.qkv.weight).value.data().to_vec();
    let values: Vec<Vec<f64>> = x
        .data()
        .chunks(dim)
        .map(|tok| {
            (0..dim)
                .map(|o| {
                    (0..dim)
                        .map(|i| tok[i] as f64 * w[i * 3 * dim + 2 * dim + o] as f64)
                        .sum()
                })
                .collect()
        })
        .collect();
    let mean: Vec<f64> = (0..dim)
        .map(|o| values.iter().map(|v| v[o]).sum::<f64>() / values.len() as f64)
        .collect();
    for row in t.value(out).data().chunks(dim) {
        for (a, b) in row.iter().zip(&mean) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rejects_wrong_width() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 0, 8, 2, 2, false, 4);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([4, 4, 6]));
    assert!(matches!(
        window_attention(&mut t, &store, x, &b, None),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn zero_weights_make_the_block_an_identity() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 2, 8, 2, 2, true, 4);
    for p in store.iter_mut() {
        if !p.name.ends_with("gamma") {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, &[2, 16, 8], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let out = swin_block(&mut t, &store, v, &b, 4, 4).unwrap();
    assert_eq!(t.value(out), &x);
}

#[test]
fn shifted_and_unshifted_blocks_agree_on_constant_images() {
    let (dim, res, m) = (8, 8, 4);
    let mut a_store = ParamStore::new();
    let a = block(&mut a_store, 9, dim, 2, m, false, res);
    let mut b_store = ParamStore::new();
    let b = block(&mut b_store, 9, dim, 2, m, true, res);
    assert_eq!((a.shift, b.shift), (0, 2));
    assert_eq!(a_store.checksum(), b_store.checksum());
    let row: Vec<f32> = (0..dim).map(|i| (i as f32 * 0.7).sin()).collect();
    let x = Tensor::new(
        vec![1, res * res, dim],
        row.iter().cycle().take(res * res * dim).cloned().collect(),
    )
    .unwrap();
    let run = |store: &ParamStore, p: &SwinBlockParams| {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let o = swin_block(&mut t, store, v, p, res, res).unwrap();
        t.value(o).clone()
    };
    assert!(run(&a_store, &a).max_abs_diff(&run(&b_store, &b)) <= 1e-5);
}

#[test]
fn block_outputs_stay_finite_for_large_inputs() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = block(&mut store, seed, 16, 4, 4, seed % 2 == 1, 8);
        let x = uniform(&mut rng, &[2, 64, 16], -10.0, 10.0);
        let mut t = Tape::new();
        let v = t.constant(x);
        let out = swin_block(&mut t, &store, v, &b, 8, 8).unwrap();
        assert!(t.value(out).is_finite());
    }
    let mut store = ParamStore::new();
    let b = block(&mut store, 0, 8, 2, 4, false, 8);
    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros([1, 48, 8]));
    assert!(matches!(
        swin_block(&mut t, &store, v, &b, 6, 8),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn patch_embed_shapes_and_identity_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let e = PatchEmbed::new(&mut store, &mut rng, "e", 4, 48);
    let eye: Vec<f32> = (0..48 * 48).map(|i| if i / 48 == i % 48 { 1.0 } else { 0.0 }).collect();
    store
        .set_value(e.proj.weight, Tensor::new(vec![48, 48], eye).unwrap())
        .unwrap();
    let x = uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let flat = e.flatten(&mut t, v).unwrap();
    let projected = e.proj.forward(&mut t, &store, flat).unwrap();
    assert_eq!(t.shape(projected), &[1, 4, 48]);
    let got = t.value(projected).data();
    for tok in 0..4 {
        let (py, px) = (tok / 2, tok % 2);
        for c in 0..3 {
            for r in 0..4 {
                for q in 0..4 {
                    let want = x.data()[(c * 8 + py * 4 + r) * 8 + px * 4 + q];
                    assert_eq!(got[tok * 48 + c * 16 + r * 4 + q], want);
                }
            }
        }
    }
    let full = t.constant(Tensor::zeros([1, 3, 224, 224]));
    let e32 = PatchEmbed::new(&mut store, &mut rng, "f", 4, 8);
    let out = e32.forward(&mut t, &store, full).unwrap();
    assert_eq!(t.shape(out), &[1, 3136, 8]);
    let bad = t.constant(Tensor::zeros([1, 3, 10, 8]));
    assert!(matches!(e32.forward(&mut t, &store, bad), Err(Error::Dimension(_))));
}

#[test]
fn merge_of_constant_input_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let m = PatchMerge::new(&mut store, &mut rng, "m", 32);
    store.set_value(m.reduction.weight, Tensor::ones([128, 64])).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::full([1, 64, 32], 0.3));
    let out = m.forward(&mut t, &store, x, 8, 8).unwrap();
    assert_eq!(t.shape(out), &[1, 16, 64]);
    let first = t.value(out).data()[0];
    assert!(t.value(out).data().iter().all(|&v| v == first));
    let odd = t.constant(Tensor::zeros([1, 15, 32]));
    assert!(matches!(m.forward(&mut t, &store, odd, 5, 3), Err(Error::Dimension(_))));
}

#[test]
fn expand_inverts_merge_shapes_for_desk_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = swinpg::generator::ModelConfig::desk();
    let (res, dims) = (cfg.stage_resolutions(), cfg.stage_dims());
    for s in 0..res.len() - 1 {
        let (r, c) = (res[s], dims[s]);
        let mut store = ParamStore::new();
        let m = PatchMerge::new(&mut store, &mut rng, "m", c);
        let e = PatchExpand::new(&mut store, &mut rng, "e", 2 * c).unwrap();
        let mut t = Tape::new();
        let x = t.constant(uniform(&mut rng, &[1, r * r, c], -1.0, 1.0));
        let merged = m.forward(&mut t, &store, x, r, r).unwrap();
        assert_eq!(t.shape(merged), &[1, r * r / 4, 2 * c]);
        let back = e.forward(&mut t, &store, merged, r / 2, r / 2).unwrap();
        assert_eq!(t.shape(back), &[1, r * r, c]);
    }
    let mut store = ParamStore::new();
    let e = PatchExpand::new(&mut store, &mut rng, "e", 64).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([1, 16, 64]));
    let out = e.forward(&mut t, &store, x, 4, 4).unwrap();
    assert_eq!(t.shape(out), &[1, 64, 32]);
    assert!(matches!(
        PatchExpand::new(&mut store, &mut rng, "o", 7),
        Err(Error::Dimension(_))
    ));
}
