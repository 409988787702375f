mod common;

use common::{elementary_grad_errors, naive_matmul, rng};
use store_core::tensor::{Graph, Tensor};
use store_core::Error;

#[test]
fn every_elementary_op_matches_differences() {
    let errs = elementary_grad_errors();
    assert!(errs.len() >= 20);
    for (name, err) in errs {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn matmul_and_layer_norm_match_loops() {
    let mut r = rng(1);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
    let y = g.matmul(xv, wv).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 5]);
    for (a, b) in g.value(y).data().iter().zip(naive_matmul(x.data(), &w)) {
        assert!((a - b).abs() < 1e-12);
    }

    let gamma = g.constant(Tensor::filled(&[4], 2.0)).unwrap();
    let beta = g.constant(Tensor::filled(&[4], 0.5)).unwrap();
    let ln = g.layer_norm(xv, gamma, beta, 0.0).unwrap();
    for (row, out) in x.data().chunks(4).zip(g.value(ln).data().chunks(4)) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        for (v, o) in row.iter().zip(out) {
            assert!((2.0 * (v - mean) / sd + 0.5 - o).abs() < 1e-10);
        }
    }
}

#[test]
fn stop_gradient_gives_zero_and_unreachable_param_errors() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = g.param(Tensor::vector(vec![3.0, -1.0])).unwrap();
    let c = g.param(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let sa = g.stop_gradient(a).unwrap();
    let prod = g.mul(sa, b).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.grad(loss, &[a, b]).unwrap();
    assert_eq!(grads[0].data(), &[0.0, 0.0]);
    assert_eq!(grads[1].data(), &[1.0, 2.0]);
    assert!(matches!(g.grad(loss, &[c]), Err(Error::NotInGraph(_))));

    let k = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
    let l2 = g.mul(k, b).unwrap();
    let l2 = g.sum(l2).unwrap();
    assert!(matches!(g.grad(l2, &[k]), Err(Error::NotAParameter(_))));
    assert!(matches!(g.grad(prod, &[b]), Err(Error::NonScalarLoss(_))));
}

#[test]
fn graph_is_reusable_across_backward_passes() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -0.7, 1.2])).unwrap();
    let t = g.tanh(x).unwrap();
    let l = g.sum(t).unwrap();
    let first = g.grad(l, &[x]).unwrap();
    let sq = g.mul(t, t).unwrap();
    let l2 = g.mean(sq).unwrap();
    g.grad(l2, &[x]).unwrap();
    assert_eq!(g.grad(l, &[x]).unwrap(), first);
    for (gv, xv) in first[0].data().iter().zip([0.3f64, -0.7, 1.2]) {
        assert!((gv - (1.0 - xv.tanh().powi(2))).abs() < 1e-15);
    }
}

#[test]
fn shape_mismatch_and_non_finite_are_reported() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.param(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    let z = g.constant(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.recip(z), Err(Error::NonFinite(_))));
    assert!(g.leaf(Tensor::vector(vec![f64::NAN]), true).is_err());
}
