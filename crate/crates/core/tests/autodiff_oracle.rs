//! Reverse-mode results against central finite differences and closed forms.

mod common;

use common::*;
use gradres::autodiff::{vjp_sum_outputs, Activation, DenseVars, SubNetwork, Tape, Tensor, Var};
use gradres::synthdata::Rng;

#[test]
fn random_mlp_gradients_match_finite_differences() {
    let mut rng = Rng::new(2024);
    for i in 0..100 {
        let worst = check_mlp(random_mlp(&mut rng));
        assert!(worst <= 1e-4, "mlp {i}: relative error {worst:e}");
    }
}

#[test]
fn every_primitive_matches_finite_differences_on_8_dim_input() {
    // one loss touching each differentiable primitive
    let mut rng = Rng::new(7);
    let x0 = random_tensor(&mut rng, 2, 8, 1.0);
    let w = random_tensor(&mut rng, 8, 8, 0.4);
    let row = random_tensor(&mut rng, 1, 8, 1.0);
    let f = |x: &Tensor, tape: &mut Tape| -> (Var, Var) {
        let xv = tape.param(x.clone()).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let rv = tape.constant(row.clone()).unwrap();
        let a = tape.linear(xv, wv, None).unwrap();
        let b = tape.activation(a, Activation::Tanh).unwrap();
        let c = tape.matmul_transposed(b, wv).unwrap();
        let d = tape.mul(c, rv).unwrap();
        let e = tape.activation_derivative(d, Activation::Sin).unwrap();
        let g = tape.sigmoid(e).unwrap();
        let n = tape.normalize_rows(g, 1e-8).unwrap();
        let m = tape.row_norm(c).unwrap();
        let cat = tape.concat(n, m).unwrap();
        let s = tape.affine(cat, 1.5, 0.25).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let lin = tape.concat(xv, xv).unwrap();
        let lin = tape.sum_all(lin).unwrap();
        let total = tape.sum_all(sq).unwrap();
        (tape.add(total, lin).unwrap(), xv)
    };
    let mut tape = Tape::new();
    let (loss, xv) = f(&x0, &mut tape);
    let g = tape.backward(loss).unwrap().wrt(xv);
    for e in 0..x0.len() {
        let mut up = x0.clone();
        up.data_mut()[e] += FD_STEP;
        let mut down = x0.clone();
        down.data_mut()[e] -= FD_STEP;
        let val = |x: &Tensor| {
            let mut t = Tape::new();
            let (l, _) = f(x, &mut t);
            t.value(l).item().unwrap()
        };
        let fd = (val(&up) - val(&down)) / (2.0 * FD_STEP);
        assert!(
            rel_err(g.data()[e], fd) <= 1e-4,
            "element {e}: {} vs {fd}",
            g.data()[e]
        );
    }
}

#[test]
fn row_sum_matches_finite_differences() {
    let mut rng = Rng::new(11);
    for _ in 0..10 {
        let n = two_layer(&mut rng, 16);
        let x = random_tensor(&mut rng, 1, 16, 1.0);
        let err = row_sum_fd_error(&n, &x);
        assert!(err <= 1e-6, "error {err:e}");
    }
}

#[test]
fn row_sum_matches_closed_form() {
    let mut rng = Rng::new(12);
    for _ in 0..10 {
        let n = two_layer(&mut rng, 16);
        let x = random_tensor(&mut rng, 3, 16, 1.0);
        for retain in [false, true] {
            let err = row_sum_closed_form_error(&n, &x, retain);
            assert!(err <= 1e-12, "retain {retain}: error {err:e}");
        }
    }
}

#[test]
fn retained_and_detached_row_sums_agree() {
    let mut rng = Rng::new(13);
    for _ in 0..20 {
        let n = two_layer(&mut rng, 8);
        let x = random_tensor(&mut rng, 5, 8, 2.0);
        let a = tape_row_sum(&n, &x, false);
        let b = tape_row_sum(&n, &x, true);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }
}

#[test]
fn retained_row_sum_is_differentiable_in_weights() {
    // d/dW of Σ g(x)² through the symbolic row sum, against differences
    let mut rng = Rng::new(14);
    let n = two_layer(&mut rng, 6);
    let x = random_tensor(&mut rng, 2, 6, 1.0);
    let objective = |w1: &Tensor, grad: bool| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let w1v = tape.param(w1.clone()).unwrap();
        let b1 = tape.param(n.b1.clone()).unwrap();
        let w2 = tape.param(n.w2.clone()).unwrap();
        let b2 = tape.param(n.b2.clone()).unwrap();
        let f = SubNetwork::new(vec![
            DenseVars {
                w: w1v,
                b: b1,
                act: Some(Activation::Tanh),
            },
            DenseVars {
                w: w2,
                b: b2,
                act: None,
            },
        ]);
        let xv = tape.constant(x.clone()).unwrap();
        let (_, g) = vjp_sum_outputs(&mut tape, &f, xv, true).unwrap();
        let sq = tape.mul(g, g).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let value = tape.value(s).item().unwrap();
        let gw = grad.then(|| tape.backward(s).unwrap().wrt(w1v));
        (value, gw)
    };
    let (_, gw) = objective(&n.w1, true);
    let gw = gw.unwrap();
    for e in 0..n.w1.len() {
        let mut up = n.w1.clone();
        up.data_mut()[e] += FD_STEP;
        let mut down = n.w1.clone();
        down.data_mut()[e] -= FD_STEP;
        let fd = (objective(&up, false).0 - objective(&down, false).0) / (2.0 * FD_STEP);
        let got = gw.data()[e];
        assert!(
            (got - fd).abs() <= 1e-6 * fd.abs().max(1.0),
            "element {e}: {got} vs {fd}"
        );
    }
}

#[test]
fn detached_row_sum_carries_no_weight_gradient() {
    let mut rng = Rng::new(15);
    let n = two_layer(&mut rng, 4);
    let mut tape = Tape::new();
    let w1 = tape.param(n.w1.clone()).unwrap();
    let b1 = tape.param(n.b1.clone()).unwrap();
    let w2 = tape.param(n.w2.clone()).unwrap();
    let b2 = tape.param(n.b2.clone()).unwrap();
    let f = SubNetwork::new(vec![
        DenseVars {
            w: w1,
            b: b1,
            act: Some(Activation::Tanh),
        },
        DenseVars {
            w: w2,
            b: b2,
            act: None,
        },
    ]);
    let xv = tape.constant(random_tensor(&mut rng, 2, 4, 1.0)).unwrap();
    let (_, g) = vjp_sum_outputs(&mut tape, &f, xv, false).unwrap();
    let s = tape.sum_all(g).unwrap();
    let grads = tape.backward(s).unwrap();
    for p in [w1, b1, w2, b2] {
        assert!(!grads.is_reached(p));
    }
}
