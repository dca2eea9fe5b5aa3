//! Helpers shared by the autodiff oracle tests and the acceptance run.
#![allow(dead_code)]

use gradres::autodiff::{vjp_sum_outputs, Activation, DenseVars, SubNetwork, Tape, Tensor, Var};
use gradres::synthdata::Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Tensor {
    let data = (0..r * c)
        .map(|_| rng.uniform_range(-scale, scale))
        .collect();
    Tensor::new(vec![r, c], data).unwrap()
}

pub struct Mlp {
    /// `(w, b, activation)` per layer.
    pub layers: Vec<(Tensor, Tensor, Option<Activation>)>,
    pub x: Tensor,
    pub target: Tensor,
}

pub fn random_mlp(rng: &mut Rng) -> Mlp {
    let depth = 1 + rng.below(3);
    let batch = 1 + rng.below(4);
    let mut widths = vec![1 + rng.below(32)];
    for _ in 0..depth {
        widths.push(1 + rng.below(32));
    }
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 1 == depth {
                None
            } else if rng.below(2) == 0 {
                Some(Activation::Tanh)
            } else {
                Some(Activation::Sin)
            };
            let s = 1.0 / (w[0] as f64).sqrt();
            (
                random_tensor(rng, w[1], w[0], s),
                random_tensor(rng, 1, w[1], 0.5),
                act,
            )
        })
        .collect();
    Mlp {
        layers,
        x: random_tensor(rng, batch, widths[0], 1.0),
        target: random_tensor(rng, batch, *widths.last().unwrap(), 1.0),
    }
}

/// Mean squared error of the network on its input, recorded on `tape`.
pub fn record(tape: &mut Tape, m: &Mlp) -> (Var, Vec<Var>) {
    let mut params = Vec::new();
    let mut h = tape.constant(m.x.clone()).unwrap();
    for (w, b, act) in &m.layers {
        let wv = tape.param(w.clone()).unwrap();
        let bv = tape.param(b.clone()).unwrap();
        params.push(wv);
        params.push(bv);
        h = tape.linear(h, wv, Some(bv)).unwrap();
        if let Some(a) = act {
            h = tape.activation(h, *a).unwrap();
        }
    }
    let t = tape.constant(m.target.clone()).unwrap();
    let diff = tape.sub(h, t).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let loss = tape.scale(s, 1.0 / m.target.len() as f64).unwrap();
    (loss, params)
}

pub fn loss_value(m: &Mlp) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = record(&mut tape, m);
    tape.value(loss).item().unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Parameter `i` in recording order: weight, bias, weight, bias, ...
pub fn param_mut(m: &mut Mlp, i: usize) -> &mut [f64] {
    let layer = &mut m.layers[i / 2];
    if i.is_multiple_of(2) {
        layer.0.data_mut()
    } else {
        layer.1.data_mut()
    }
}

/// Compares every parameter gradient above `1e-6` in magnitude against
/// central differences; returns the worst relative error.
pub fn check_mlp(mut m: Mlp) -> f64 {
    let mut tape = Tape::new();
    let (loss, params) = record(&mut tape, &m);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
    let mut worst = 0.0f64;
    for (pi, analytic) in analytic.iter().enumerate() {
        for e in 0..analytic.len() {
            let orig = param_mut(&mut m, pi)[e];
            param_mut(&mut m, pi)[e] = orig + FD_STEP;
            let up = loss_value(&m);
            param_mut(&mut m, pi)[e] = orig - FD_STEP;
            let down = loss_value(&m);
            param_mut(&mut m, pi)[e] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let g = analytic.data()[e];
            if g.abs() > 1e-6 {
                worst = worst.max(rel_err(g, fd));
            }
        }
    }
    worst
}

pub struct TwoLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn two_layer(rng: &mut Rng, d: usize) -> TwoLayer {
    let s = 1.0 / (d as f64).sqrt();
    TwoLayer {
        w1: random_tensor(rng, d, d, 2.0 * s),
        b1: random_tensor(rng, 1, d, 0.5),
        w2: random_tensor(rng, d, d, 2.0 * s),
        b2: random_tensor(rng, 1, d, 0.5),
    }
}

/// `Σᵢ Fᵢ(x)` for `F(x) = W₂ tanh(W₁x + b₁) + b₂`, evaluated directly.
pub fn sum_f(n: &TwoLayer, x: &[f64]) -> f64 {
    let d = x.len();
    let mut total = 0.0;
    let hidden: Vec<f64> = (0..d)
        .map(|o| {
            let z: f64 =
                (0..d).map(|i| n.w1.data()[o * d + i] * x[i]).sum::<f64>() + n.b1.data()[o];
            z.tanh()
        })
        .collect();
    for o in 0..d {
        total += (0..d)
            .map(|i| n.w2.data()[o * d + i] * hidden[i])
            .sum::<f64>()
            + n.b2.data()[o];
    }
    total
}

pub fn tape_row_sum(n: &TwoLayer, x: &Tensor, retain: bool) -> Tensor {
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
    let xv = tape.constant(x.clone()).unwrap();
    let (_, g) = vjp_sum_outputs(&mut tape, &f, xv, retain).unwrap();
    tape.value(g).clone()
}

/// Worst error of the row sum against central differences of `Σᵢ Fᵢ`,
/// relative to `max(|fd|, 1)`.
pub fn row_sum_fd_error(n: &TwoLayer, x: &Tensor) -> f64 {
    let g = tape_row_sum(n, x, false);
    let d = x.cols();
    let mut worst = 0.0f64;
    for r in 0..x.rows() {
        let xr = x.row_slice(r);
        for i in 0..d {
            let mut up = xr.to_vec();
            up[i] += FD_STEP;
            let mut down = xr.to_vec();
            down[i] -= FD_STEP;
            let fd = (sum_f(n, &up) - sum_f(n, &down)) / (2.0 * FD_STEP);
            worst = worst.max((g.get(r, i) - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

/// Worst error of the row sum against `W₁ᵀ(tanh′(W₁x + b₁) ⊙ W₂ᵀ1)`,
/// relative to `max(|expected|, 1)`.
pub fn row_sum_closed_form_error(n: &TwoLayer, x: &Tensor, retain: bool) -> f64 {
    let g = tape_row_sum(n, x, retain);
    let d = x.cols();
    let col: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|o| n.w2.get(o, i)).sum())
        .collect();
    let mut worst = 0.0f64;
    for r in 0..x.rows() {
        let xr = x.row_slice(r);
        let s: Vec<f64> = (0..d)
            .map(|o| {
                let z: f64 = (0..d).map(|i| n.w1.get(o, i) * xr[i]).sum::<f64>() + n.b1.data()[o];
                let t = z.tanh();
                (1.0 - t * t) * col[o]
            })
            .collect();
        for i in 0..d {
            let expect: f64 = (0..d).map(|o| n.w1.get(o, i) * s[o]).sum();
            worst = worst.max((g.get(r, i) - expect).abs() / expect.abs().max(1.0));
        }
    }
    worst
}
