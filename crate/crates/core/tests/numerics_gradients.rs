//! Every differentiable op checked against central differences.

use evfilter::numerics::{
    argmax, finite_diff_gradient, layer_norm, softmax, softmax_cross_entropy, Graph, NodeId, Real, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Builds `sum(weights ⊙ f(x))` with fixed random weights so every output
/// entry carries a distinct cotangent, then compares `d/dx` both ways.
fn check_unary<T: Real>(
    x: &Tensor<T>,
    f: impl Fn(&mut Graph<T>, NodeId) -> NodeId,
    h: f64,
    tol: f64,
) {
    let loss = |xv: &Tensor<T>| -> (T, Option<Tensor<T>>) {
        let mut g = Graph::new();
        let xn = g.constant(xv.clone());
        let y = f(&mut g, xn);
        let shape = g.value(y).shape().to_vec();
        let w = random(&shape, 99).cast::<T>();
        let wn = g.constant(w);
        let prod = g.mul(y, wn).unwrap();
        let s = g.sum(prod);
        let value = g.value(s).data()[0];
        let grads = g.backward(s).unwrap();
        (value, Some(grads.wrt(xn)))
    };
    let analytic = loss(x).1.unwrap();
    let shape = x.shape().to_vec();
    let numeric = finite_diff_gradient(
        |theta: &[T]| loss(&Tensor::new(shape.clone(), theta.to_vec()).unwrap()).0,
        x.data(),
        T::lit(h),
    );
    let scale = numeric.iter().fold(1e-3f64, |m, v| m.max(v.as_f64().abs()));
    for (a, n) in analytic.data().iter().zip(&numeric) {
        let err = (a.as_f64() - n.as_f64()).abs() / scale;
        assert!(err < tol, "analytic {a:?} numeric {n:?} relative {err:e}");
    }
}

#[test]
fn matmul_both_operands_f32() {
    // 5×3 · 3×4 in 32-bit with h = 1e-3 as the coarse oracle.
    let a = random(&[5, 3], 1).cast::<f32>();
    let b = random(&[3, 4], 2).cast::<f32>();
    let bc = b.clone();
    check_unary(&a, move |g, x| {
        let bn = g.constant(bc.clone());
        g.matmul(x, bn).unwrap()
    }, 1e-3, 1e-3);
    let ac = a.clone();
    check_unary(&b, move |g, x| {
        let an = g.constant(ac.clone());
        g.matmul(an, x).unwrap()
    }, 1e-3, 1e-3);
}

#[test]
fn matmul_nt_both_operands() {
    let a = random(&[4, 6], 3);
    let b = random(&[5, 6], 4);
    let bc = b.clone();
    check_unary(&a, move |g, x| {
        let bn = g.constant(bc.clone());
        g.matmul_nt(x, bn).unwrap()
    }, 1e-6, 1e-7);
    let ac = a.clone();
    check_unary(&b, move |g, x| {
        let an = g.constant(ac.clone());
        g.matmul_nt(an, x).unwrap()
    }, 1e-6, 1e-7);
}

#[test]
fn layer_norm_input_gain_bias() {
    let x = random(&[3, 8], 5);
    let gain = random(&[8], 6);
    let bias = random(&[8], 7);
    let (gc, bc) = (gain.clone(), bias.clone());
    check_unary(&x, move |g, x| {
        let gn = g.constant(gc.clone());
        let bn = g.constant(bc.clone());
        g.layer_norm(x, gn, bn, 1e-5).unwrap()
    }, 1e-6, 1e-6);
    let xc = x.clone();
    let bc = bias.clone();
    check_unary(&gain, move |g, gn| {
        let xn = g.constant(xc.clone());
        let bn = g.constant(bc.clone());
        g.layer_norm(xn, gn, bn, 1e-5).unwrap()
    }, 1e-6, 1e-7);
    let xc = x.clone();
    check_unary(&bias, move |g, bn| {
        let xn = g.constant(xc.clone());
        let gn = g.constant(gain.clone());
        g.layer_norm(xn, gn, bn, 1e-5).unwrap()
    }, 1e-6, 1e-7);
}

#[test]
fn layer_norm_d8_f32() {
    let x = random(&[1, 8], 8).cast::<f32>();
    let gain = Tensor::<f32>::full(&[8], 1.0);
    let bias = Tensor::<f32>::zeros(&[8]);
    check_unary(&x, move |g, x| {
        let gn = g.constant(gain.clone());
        let bn = g.constant(bias.clone());
        g.layer_norm(x, gn, bn, 1e-5).unwrap()
    }, 1e-2, 1e-3);
}

#[test]
fn pointwise_and_row_ops() {
    let x = random(&[3, 5], 9);
    check_unary(&x, |g, x| g.gelu(x), 1e-6, 1e-7);
    check_unary(&x, |g, x| g.softmax_rows(x), 1e-6, 1e-7);
    check_unary(&x, |g, x| g.scale(x, -0.7), 1e-6, 1e-8);
    check_unary(&x, |g, x| g.mean_rows(x), 1e-6, 1e-8);
    check_unary(&x, |g, x| g.select_row(x, 2).unwrap(), 1e-6, 1e-8);
    check_unary(&x, |g, x| g.slice_cols(x, 1, 3).unwrap(), 1e-6, 1e-8);
    check_unary(&x, |g, x| {
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 3).unwrap();
        g.concat_cols(&[b, a]).unwrap()
    }, 1e-6, 1e-8);
    check_unary(&x, |g, x| {
        let r0 = g.select_row(x, 0).unwrap();
        let r2 = g.select_row(x, 2).unwrap();
        g.stack_rows(&[r2, r0, r2]).unwrap()
    }, 1e-6, 1e-8);
    check_unary(&x, |g, x| {
        let sq = g.mul(x, x).unwrap();
        g.add_n(&[x, sq, x]).unwrap()
    }, 1e-6, 1e-7);
}

#[test]
fn broadcast_ops_reach_both_inputs() {
    let x = random(&[4, 3], 10);
    let row = random(&[3], 11);
    let rc = row.clone();
    check_unary(&x, move |g, x| {
        let r = g.constant(rc.clone());
        g.add_row(x, r).unwrap()
    }, 1e-6, 1e-8);
    let xc = x.clone();
    check_unary(&row, move |g, r| {
        let xn = g.constant(xc.clone());
        g.add_row(xn, r).unwrap()
    }, 1e-6, 1e-8);
    let xc = x.clone();
    check_unary(&Tensor::scalar(0.3), move |g, s| {
        let xn = g.constant(xc.clone());
        g.add_scalar(xn, s).unwrap()
    }, 1e-6, 1e-8);
    let xc = x.clone();
    check_unary(&random(&[3], 12), move |g, w| {
        let xn = g.constant(xc.clone());
        g.scale_by_elem(xn, w, 1).unwrap()
    }, 1e-6, 1e-8);
}

#[test]
fn gather_scatters_into_repeated_rows() {
    let table = random(&[5, 3], 13);
    check_unary(&table, |g, t| g.gather(t, &[4, 0, 4, 2]).unwrap(), 1e-6, 1e-8);
}

#[test]
fn constrained_matrix_sums_diagonal_and_off_diagonal() {
    let h = random(&[4, 3], 14);
    let hc = h.clone();
    let beta = Tensor::scalar(-0.4);
    check_unary(&Tensor::scalar(0.8), move |g, a| {
        let b = g.constant(beta.clone());
        let m = g.constrained_matrix(a, b, 4).unwrap();
        let hn = g.constant(hc.clone());
        g.matmul(m, hn).unwrap()
    }, 1e-6, 1e-7);
    let alpha = Tensor::scalar(0.8);
    check_unary(&Tensor::scalar(-0.4), move |g, b| {
        let a = g.constant(alpha.clone());
        let m = g.constrained_matrix(a, b, 4).unwrap();
        let hn = g.constant(h.clone());
        g.matmul(m, hn).unwrap()
    }, 1e-6, 1e-7);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_one_hot() {
    let logits = [0.3f64, -1.2, 2.0, 0.1];
    for label in 0..4 {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![4, 1], logits.to_vec()).unwrap());
        let loss = g.cross_entropy(l, label).unwrap();
        let grad = g.backward(loss).unwrap().wrt(l);
        let p = softmax(&logits);
        for j in 0..4 {
            let want = p[j] - if j == label { 1.0 } else { 0.0 };
            assert!((grad.data()[j] - want).abs() < 1e-15);
        }
        let numeric = finite_diff_gradient(|z: &[f64]| softmax_cross_entropy(z, label).unwrap(), &logits, 1e-6);
        for j in 0..4 {
            assert!((grad.data()[j] - numeric[j]).abs() < 1e-8);
        }
    }
}

#[test]
fn cross_entropy_is_stable_for_extreme_logits() {
    let loss = softmax_cross_entropy(&[1000.0f32, 0.0, -1000.0, 0.0], 0).unwrap();
    assert!(loss.is_finite() && loss.abs() < 1e-6);
    let loss = softmax_cross_entropy(&[1000.0f32, 0.0, -1000.0, 0.0], 2).unwrap();
    assert!(loss.is_finite() && (loss - 2000.0).abs() < 1e-2);
    let p = softmax(&[-1e30f64, -1e30, -1e30, -1e30]);
    assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn uniform_logits_give_ln4() {
    for c in [0.0f64, -3.5, 17.0] {
        let loss = softmax_cross_entropy(&[c; 4], 1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_rejects_bad_label() {
    assert!(matches!(
        softmax_cross_entropy(&[0.0f64; 4], 4),
        Err(evfilter::Error::Index { .. })
    ));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
    assert_eq!(argmax(&[2.0f64; 4]), 0);
}

#[test]
fn plain_layer_norm_matches_graph_and_rejects_degenerate_input() {
    let x = random(&[2, 6], 15);
    let gain = random(&[6], 16);
    let bias = random(&[6], 17);
    let plain = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
    let mut g = Graph::new();
    let (xn, gn, bn) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
    assert_eq!(g.value(y), &plain);

    let one = Tensor::<f64>::zeros(&[2, 1]);
    let g1 = Tensor::<f64>::full(&[1], 1.0);
    assert!(layer_norm(&one, &g1, &Tensor::zeros(&[1]), 1e-5).is_err());
    assert!(layer_norm(&x, &gain, &bias, 0.0).is_err());
}

#[test]
fn shape_errors_name_both_operands() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    match g.matmul(a, b) {
        Err(evfilter::Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 5]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}
