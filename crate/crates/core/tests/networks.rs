use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swinpg::discriminator::{output_size, Discriminator, KERNEL, PADDING, STRIDES};
use swinpg::generator::{BlockKind, Generator, ModelConfig};
use swinpg::params::uniform;
use swinpg::swin::effective_window;
use swinpg::tensor::{Tape, Tensor};
use swinpg::train::loss::loss_l1;
use swinpg::Error;

/// Parameter count written out layer by layer from the architecture.
fn expected_params(cfg: &ModelConfig) -> usize {
    let c = cfg.embed_dim;
    let p = cfg.patch_size;
    let res = cfg.stage_resolutions();
    let block = |d: usize, h: usize, r: usize| -> usize {
        match cfg.block_kind {
            BlockKind::Swin => {
                let (m, _) = effective_window(cfg.window_size, false, (r, r));
                let norms = 2 * 2 * d;
                let attn = d * 3 * d + 3 * d + (2 * m - 1).pow(2) * h + d * d + d;
                let mlp = d * 4 * d + 4 * d + 4 * d * d + d;
                norms + attn + mlp
            }
            BlockKind::Conv => 2 * (d * d * 9 + 2 * d),
        }
    };
    let stage = |s: usize| cfg.depths[s] * block(c << s, cfg.heads[s], res[s]);
    let stages = cfg.depths.len();
    let mut total = 3 * p * p * c + c + 2 * c;
    for s in 0..stages {
        total += stage(s);
        if s + 1 < stages {
            let d = c << s;
            total += 2 * 4 * d + 4 * d * 2 * d;
        }
    }
    for s in 0..stages - 1 {
        let d = c << s;
        total += 2 * d * 4 * d; // expand 2d -> 2*2 blocks of d
        total += 2 * d * d + d; // skip fusion
        total += stage(s);
    }
    total + 2 * c + c * p * p * c + c * 3 + 3
}

#[test]
fn parameter_count_matches_layer_ledger() {
    let desk = ModelConfig::desk();
    let g = Generator::build(&desk, 0).unwrap();
    assert_eq!(g.num_params(), expected_params(&desk));
    // frozen after the first build; guards against silent architecture drift
    assert_eq!(g.num_params(), 3_032_731);
    let conv = ModelConfig {
        block_kind: BlockKind::Conv,
        ..desk
    };
    assert_eq!(Generator::build(&conv, 0).unwrap().num_params(), expected_params(&conv));
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::desk();
    let a = Generator::build(&cfg, 7).unwrap();
    let b = Generator::build(&cfg, 7).unwrap();
    let c = Generator::build(&cfg, 8).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_ne!(a.params.checksum(), c.params.checksum());
    assert!(a.params.iter().all(|p| p.value.is_finite()));
    let d1 = Discriminator::build(3);
    let d2 = Discriminator::build(3);
    assert_eq!(d1.params.checksum(), d2.params.checksum());
}

#[test]
fn generator_output_shape_bound_and_determinism() {
    let cfg = ModelConfig::desk();
    let mut g = Generator::build(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = uniform(&mut rng, &[2, 3, 64, 64], -1.0, 1.0);
    let a = g.enhance(&x).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert!(a.data().iter().all(|v| v.abs() < 1.0));
    assert_eq!(a, g.enhance(&x).unwrap());
    let mut other = Generator::build(&cfg, 0).unwrap();
    assert_eq!(a, other.enhance(&x).unwrap());
    let wrong = Tensor::zeros([1, 3, 32, 32]);
    assert!(matches!(g.enhance(&wrong), Err(Error::Dimension(_))));
}

#[test]
fn every_parameter_receives_gradient() {
    for kind in [BlockKind::Swin, BlockKind::Conv] {
        let cfg = ModelConfig {
            block_kind: kind,
            ..ModelConfig::desk()
        };
        let mut g = Generator::build(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(uniform(&mut rng, &[2, 3, 64, 64], -1.0, 1.0));
        let y = t.constant(uniform(&mut rng, &[2, 3, 64, 64], -1.0, 1.0));
        let out = g.forward(&mut t, x, true).unwrap();
        let l = loss_l1(&mut t, out, y).unwrap();
        t.backward_into(l, &mut [&mut g.params]).unwrap();
        let dead: Vec<&str> = g
            .params
            .iter()
            .filter(|p| p.grad.as_ref().is_none_or(|gr| gr.iter().all(|&v| v == 0.0)))
            .map(|p| p.name.as_str())
            .collect();
        assert!(dead.is_empty(), "{kind:?}: {dead:?}");
    }
}

#[test]
fn conv_ablation_keeps_interface_shapes() {
    let swin = ModelConfig::desk();
    let conv = ModelConfig {
        block_kind: BlockKind::Conv,
        ..swin.clone()
    };
    let mut a = Generator::build(&swin, 0).unwrap();
    let mut b = Generator::build(&conv, 0).unwrap();
    assert_ne!(a.num_params(), b.num_params());
    let x = Tensor::full([2, 3, 64, 64], 0.1);
    let (ya, yb) = (a.enhance(&x).unwrap(), b.enhance(&x).unwrap());
    assert_eq!(ya.shape(), yb.shape());
    assert!(yb.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn zeroed_head_gives_zero_image() {
    let mut g = Generator::build(&ModelConfig::desk(), 2).unwrap();
    let head = g.head.weight;
    g.params.set_value(head, Tensor::zeros([32, 3])).unwrap();
    let out = g.enhance(&Tensor::full([1, 3, 64, 64], 0.4)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn discriminator_maps_follow_shape_formula() {
    let mut d = Discriminator::build(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for size in [24, 32, 64, 70, 128, 224] {
        let mut t = Tape::new();
        let x = t.constant(uniform(&mut rng, &[1, 6, size, size], -1.0, 1.0));
        let out = d.forward(&mut t, x, false).unwrap();
        let side = output_size(size, &STRIDES).unwrap();
        assert_eq!(t.shape(out), &[1, 1, side, side], "input {size}");
        assert!(t.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_eq!(output_size(224, &STRIDES), Some(26));
    assert_eq!(output_size(64, &STRIDES), Some(6));
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([1, 5, 64, 64]));
    assert!(matches!(d.forward(&mut t, x, false), Err(Error::Dimension(_))));
}

/// Input rows (or columns) seen by output index `o` after all layers.
fn receptive_span(o: usize) -> (isize, isize) {
    let (mut lo, mut hi) = (o as isize, o as isize);
    for &s in STRIDES.iter().rev() {
        lo = lo * s as isize - PADDING as isize;
        hi = hi * s as isize - PADDING as isize + KERNEL as isize - 1;
    }
    (lo, hi)
}

#[test]
fn discriminator_is_local_per_patch() {
    let mut d = Discriminator::build(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, &[1, 6, 64, 64], -1.0, 1.0);
    let run = |d: &mut Discriminator, x: &Tensor| {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let o = d.forward(&mut t, v, false).unwrap();
        t.value(o).clone()
    };
    let base = run(&mut d, &x);
    for (py, px) in [(10usize, 40usize), (0, 0), (63, 31)] {
        let mut y = x.clone();
        y.data_mut()[(2 * 64 + py) * 64 + px] += 0.5;
        let moved = run(&mut d, &y);
        let mut changed = 0;
        for oy in 0..6 {
            for ox in 0..6 {
                let diff = moved.data()[oy * 6 + ox] != base.data()[oy * 6 + ox];
                let (ry, rx) = (receptive_span(oy), receptive_span(ox));
                let covers = (ry.0..=ry.1).contains(&(py as isize)) && (rx.0..=rx.1).contains(&(px as isize));
                assert!(covers || !diff, "cell ({oy},{ox}) changed for pixel ({py},{px})");
                changed += diff as usize;
            }
        }
        assert!(changed > 0);
    }
    assert_eq!(receptive_span(0).1 - receptive_span(0).0 + 1, 70);
}
