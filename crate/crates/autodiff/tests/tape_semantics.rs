//! Contract tests for tape lifecycle: backward-once, gradient
//! accumulation across graphs, and parameter mounting rules.

use fes_autodiff::{AutodiffError, Graph, ParamSet, Tensor};
use proptest::prelude::*;

#[test]
fn backward_twice_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(AutodiffError::BackwardTwice)));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(AutodiffError::NonScalar(_))));
}

#[test]
fn export_before_backward_is_rejected() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::scalar(1.0));
    let mut g = Graph::new();
    let _ = g.param(&ps, "w").unwrap();
    assert!(matches!(
        g.export_grads(&mut ps),
        Err(AutodiffError::ContractViolation(_))
    ));
}

#[test]
fn grads_accumulate_across_graphs_until_zeroed() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::scalar(3.0));

    // d/dw of w^2 = 6, twice -> 12.
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let y = g.mul(w, w).unwrap();
        g.backward(y).unwrap();
        g.export_grads(&mut ps).unwrap();
    }
    assert_eq!(ps.grad("w").unwrap().unwrap().data()[0], 12.0);

    ps.zero_grads();
    let mut g = Graph::new();
    let w = g.param(&ps, "w").unwrap();
    let y = g.mul(w, w).unwrap();
    g.backward(y).unwrap();
    g.export_grads(&mut ps).unwrap();
    assert_eq!(ps.grad("w").unwrap().unwrap().data()[0], 6.0);
}

#[test]
fn mounting_a_param_twice_reuses_the_node() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::scalar(2.0));
    let mut g = Graph::new();
    let w1 = g.param(&ps, "w").unwrap();
    let w2 = g.param(&ps, "w").unwrap();
    assert_eq!(w1, w2);
    // loss = w * w through two mounts; gradient must be 2w = 4, not double.
    let y = g.mul(w1, w2).unwrap();
    g.backward(y).unwrap();
    g.export_grads(&mut ps).unwrap();
    assert_eq!(ps.grad("w").unwrap().unwrap().data()[0], 4.0);
}

#[test]
fn unused_param_exports_zero_gradient() {
    let mut ps = ParamSet::new();
    ps.insert("used", Tensor::scalar(2.0));
    ps.insert("unused", Tensor::vector(vec![1.0, 1.0]));
    let mut g = Graph::new();
    let u = g.param(&ps, "used").unwrap();
    let _floating = g.param(&ps, "unused").unwrap();
    let y = g.mul(u, u).unwrap();
    g.backward(y).unwrap();
    g.export_grads(&mut ps).unwrap();
    assert_eq!(ps.grad("used").unwrap().unwrap().data()[0], 4.0);
    assert_eq!(ps.grad("unused").unwrap().unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(5.0));
    let x = g.input(Tensor::scalar(2.0));
    let y = g.mul(c, x).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data()[0], 5.0);
}

#[test]
fn unknown_param_name_fails_at_mount() {
    let ps = ParamSet::new();
    let mut g = Graph::new();
    assert!(matches!(
        g.param(&ps, "ghost"),
        Err(AutodiffError::UnknownParam(_))
    ));
}

proptest! {
    /// Softmax outputs are valid distributions for arbitrary finite logits.
    #[test]
    fn softmax_rows_always_normalize(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-60.0..60.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let sm = g.softmax(x, 1).unwrap();
        let t = g.value(sm);
        for i in 0..rows {
            let sum: f64 = t.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(t.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    /// KL divergence of two softmax distributions is nonnegative.
    #[test]
    fn kl_is_nonnegative(seed in 0u64..1000, n in 2usize..8) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let lp: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lq: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lp = g.constant(Tensor::vector(lp));
        let lq = g.constant(Tensor::vector(lq));
        let p = g.softmax(lp, 0).unwrap();
        let q = g.softmax(lq, 0).unwrap();
        let kl = fes_autodiff::kl_divergence(&mut g, p, q).unwrap();
        prop_assert!(g.scalar_value(kl).unwrap() >= -1e-12);
    }

    /// Matmul forward agrees with a naive triple loop.
    #[test]
    fn matmul_matches_naive(seed in 0u64..500, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expected = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(vec![m, k], a).unwrap());
        let bv = g.constant(Tensor::new(vec![k, n], b).unwrap());
        let ab = g.matmul(av, bv).unwrap();
        for (got, want) in g.value(ab).data().iter().zip(&expected) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }
}
