use super::*;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn square_value_and_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.var(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let rec = g.evaluate_with_grads(y, &[x]).unwrap();
    assert_eq!(rec.value, 9.0);
    assert_eq!(rec.grad(x).item(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let x = g.var(rand_tensor(&[3, 5], &mut rng));
    let s = g.softmax(x, 1).unwrap();
    let l = g.sum(s);
    let rec = g.evaluate_with_grads(l, &[x]).unwrap();
    assert!(rec.grad(x).max_abs() < 1e-15);
}

#[test]
fn quadratic_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = rand_tensor(&[4, 1], &mut rng);
    let b = rand_tensor(&[4, 1], &mut rng);
    let w = rand_tensor(&[4, 4], &mut rng);
    let check = finite_diff_check(
        |g, w| {
            let v = g.constant(v.clone());
            let b = g.constant(b.clone());
            let wv = g.matmul(w, v)?;
            let r = g.sub(wv, b)?;
            let sq = g.square(r)?;
            Ok(g.sum(sq))
        },
        &w,
        1e-5,
        DiffMode::Central,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{}", check.max_rel_error);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn conv_of_ones_counts_window() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 5, 5]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.dims(), &[1, 1, 5, 5]);
    for r in 1..4 {
        for c in 1..4 {
            assert_eq!(out.data()[r * 5 + c], 9.0);
        }
    }
    assert_eq!(out.data()[0], 4.0);
    let y2 = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.dims(y2), &[1, 1, 3, 3]);
    assert_eq!(g.value(y2).data()[4], 9.0);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 6], 3.5));
    let y = g.layer_norm(x, None, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let z = g.constant(Tensor::full(&[1, 4, 2, 2], -1.0));
    let gn = g.group_norm(z, 2, None, None).unwrap();
    assert!(g.value(gn).data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_loss_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[6, 1], &mut rng);
    let w = rand_tensor(&[1, 6], &mut rng);
    let check = finite_diff_check(
        |g, w| {
            let x = g.constant(x.clone());
            let y = g.matmul(w, x)?;
            Ok(g.sum(y))
        },
        &w,
        1e-3,
        DiffMode::Central,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-10);
}

#[test]
fn unused_variable_gets_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let other = rand_tensor(&[3], &mut rng);
    let check = finite_diff_check(
        |g, _w| {
            let o = g.constant(other.clone());
            let sq = g.square(o)?;
            Ok(g.sum(sq))
        },
        &rand_tensor(&[2, 2], &mut rng),
        1e-5,
        DiffMode::Central,
    )
    .unwrap();
    assert!(check.analytic.data().iter().all(|&v| v == 0.0));
    assert!(check.numeric.max_abs() < 1e-8);

    let mut g = Graph::<f32>::new();
    let a = g.var(Tensor::ones(&[2]));
    let unused = g.var(Tensor::ones(&[3, 3]));
    let l = g.sum(a);
    let rec = g.evaluate_with_grads(l, &[a, unused]).unwrap();
    assert_eq!(rec.grad(unused), &Tensor::zeros(&[3, 3]));
}

#[test]
fn nonpositive_step_rejected() {
    let r = finite_diff_check(|g, v| Ok(g.sum(v)), &Tensor::ones(&[2]), 0.0, DiffMode::Central);
    assert!(matches!(r, Err(TensorError::Parameter(_))));
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = Graph::<f32>::new();
    let a = g.var(Tensor::ones(&[2]));
    let b = g.scale(a, 2.0);
    assert!(matches!(g.evaluate_with_grads(b, &[a]), Err(TensorError::Contract(_))));
}

#[test]
fn shape_error_names_both_operands() {
    let mut g = Graph::<f32>::new();
    let a = g.var(Tensor::ones(&[2, 3]));
    let b = g.var(Tensor::ones(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 5]
        }
    );
    let err = g.add(a, b).unwrap_err();
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 5]"));
}

#[test]
fn broadcast_add_reduces_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.var(Tensor::ones(&[2, 3, 2, 2]));
    let b = g.var(Tensor::ones(&[3, 1, 1]));
    let y = g.add(x, b).unwrap();
    let l = g.sum(y);
    let rec = g.evaluate_with_grads(l, &[x, b]).unwrap();
    assert_eq!(rec.grad(b).data(), &[8.0, 8.0, 8.0]);
}

#[test]
fn identical_graphs_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f32>::new();
        let x = g.var(Tensor::from_fn(&[2, 3, 6, 6], |_| rng.gen_range(-1.0..1.0)));
        let w = g.var(Tensor::from_fn(&[4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0)));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.silu(y);
        let y = g.group_norm(y, 2, None, None).unwrap();
        let s = g.softmax(y, 3).unwrap();
        let sq = g.square(s).unwrap();
        let l = g.mean(sq);
        g.evaluate_with_grads(l, &[x, w]).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    for (k, v) in &a.grads {
        assert_eq!(v, &b.grads[k]);
    }
}

#[test]
fn capability_list_covers_model_needs() {
    let caps = required_op_set();
    for c in [
        Capability::MatMul,
        Capability::BatchMatMul,
        Capability::Conv2d3x3Stride2,
        Capability::Softmax,
        Capability::EmbeddingLookup,
    ] {
        assert!(caps.contains(&c));
    }
}
