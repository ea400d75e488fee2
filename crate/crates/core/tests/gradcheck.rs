use swinpg::swin::{window_partition, window_reverse};
use swinpg::tensor::gradcheck::{check_fn, discriminator_reference_check, gradcheck, OPS};
use swinpg::tensor::Tensor;
use swinpg::Error;

fn report(op: &str, seeds: std::ops::Range<u64>) -> Vec<String> {
    let mut failures = Vec::new();
    for seed in seeds {
        let r = gradcheck(op, seed).unwrap();
        println!(
            "{op:>26} seed {seed}: {:.3e} (tol {:.0e})",
            r.max_rel_error, r.tolerance
        );
        if !r.passed {
            failures.push(format!("{op}@{seed}: {:.3e}", r.max_rel_error));
        }
    }
    failures
}

#[test]
fn every_layer_op_passes_on_three_seeds() {
    let failures: Vec<String> = OPS
        .iter()
        .filter(|&&op| op != "discriminator")
        .flat_map(|op| report(op, 0..3))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

// At a step of 1e-3 the train-mode batch statistics move every
// pre-activation of a channel, and some cross the leaky-relu kink, so the
// central difference itself is off by a few percent.
#[test]
fn full_discriminator_passes_on_three_seeds() {
    let failures = report("discriminator", 0..3);
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn discriminator_matches_f64_reference_at_small_step() {
    let r = discriminator_reference_check(0, 24, 1e-6, 1e-4).unwrap();
    println!("{r:?}");
    assert!(r.passed, "{r:?}");
}

#[test]
fn single_op_tolerances() {
    for (op, tol) in [
        ("matmul", 1e-3),
        ("conv2d", 1e-3),
        ("gelu", 1e-3),
        ("layer_norm", 1e-3),
        ("batch_norm", 2e-3),
        ("permute", 1e-3),
        ("split", 1e-3),
    ] {
        for seed in 0..3 {
            let r = gradcheck(op, seed).unwrap();
            assert!(r.max_rel_error <= tol, "{op}@{seed}: {:.3e}", r.max_rel_error);
        }
    }
}

#[test]
fn permutation_ops_are_exact() {
    for op in ["roll", "reshape", "permute", "concat"] {
        assert_eq!(gradcheck(op, 0).unwrap().max_rel_error, 0.0, "{op}");
    }
    let input = Tensor::new(vec![2, 4, 4, 3], (0..96).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let r = check_fn("partition_reverse", vec![input], 0.0, 0, |_, _, t, v| {
        let w = window_partition(t, v[0], 2)?;
        window_reverse(t, w, 2, 4, 4)
    })
    .unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn unknown_op_is_a_lookup_error() {
    assert!(matches!(
        gradcheck("fft", 0),
        Err(Error::Lookup { ref name, .. }) if name == "fft"
    ));
}
