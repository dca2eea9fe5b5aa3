//! Dense sub-networks `F: ℝᵈ → ℝᵈ` living on a tape, and the Jacobian row
//! sum `Σᵢ ∇Fᵢ(x) = ∇ₓ(1ᵀF(x))`.

use super::{Activation, AutodiffError, Tape, Tensor, Var};

/// One dense layer whose weight and bias are already tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
    /// Applied after the affine map when present.
    pub act: Option<Activation>,
}

/// A stack of dense layers. An empty stack is the identity map.
#[derive(Clone, Debug, Default)]
pub struct SubNetwork {
    pub layers: Vec<DenseVars>,
}

/// Forward record of a [`SubNetwork`].
#[derive(Clone, Debug)]
pub struct SubNetworkTrace {
    pub input: Var,
    pub output: Var,
    /// Pre-activation of every layer, in layer order.
    pub pre_activations: Vec<Var>,
}

impl SubNetwork {
    pub fn new(layers: Vec<DenseVars>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<SubNetworkTrace, AutodiffError> {
        let mut h = x;
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = tape.linear(h, layer.w, Some(layer.b))?;
            pre.push(z);
            h = match layer.act {
                Some(act) => tape.activation(z, act)?,
                None => z,
            };
        }
        Ok(SubNetworkTrace {
            input: x,
            output: h,
            pre_activations: pre,
        })
    }
}

/// Evaluates `F(x)` and `g = Σᵢ ∇Fᵢ(x)` for every row of `x`.
///
/// With `retain == false` the row sums come from a reverse sweep seeded with
/// ones and enter the tape as a constant, so later training passes treat `g`
/// as data. With `retain == true` the same quantity is spelled out with tape
/// primitives (column sums, activation derivatives, transposed products) and
/// training gradients flow through it.
pub fn vjp_sum_outputs(
    tape: &mut Tape,
    f: &SubNetwork,
    x: Var,
    retain: bool,
) -> Result<(SubNetworkTrace, Var), AutodiffError> {
    let (n, d) = tape.value(x).dims();
    let trace = f.forward(tape, x)?;
    let (on, od) = tape.value(trace.output).dims();
    if on != n || od != d {
        return Err(AutodiffError::ShapeMismatch(format!(
            "sub-network maps {d} features to {od}; expected a square map"
        )));
    }
    let g = if retain {
        symbolic_row_sum(tape, f, &trace)?
    } else {
        let seed = Tensor::full(n, d, 1.0);
        let g = tape.vjp(trace.output, &seed, x)?;
        tape.constant(g)?
    };
    Ok((trace, g))
}

fn symbolic_row_sum(
    tape: &mut Tape,
    f: &SubNetwork,
    trace: &SubNetworkTrace,
) -> Result<Var, AutodiffError> {
    let (n, d) = tape.value(trace.input).dims();
    // None stands for an all-ones cotangent that has not been materialised.
    let mut s: Option<Var> = None;
    for (layer, &pre) in f.layers.iter().zip(&trace.pre_activations).rev() {
        if let Some(act) = layer.act {
            let dphi = tape.activation_derivative(pre, act)?;
            s = Some(match s {
                Some(s) => tape.mul(dphi, s)?,
                None => dphi,
            });
        }
        s = Some(match s {
            Some(s) => tape.matmul_transposed(s, layer.w)?,
            None => tape.col_sum(layer.w)?,
        });
    }
    let ones = tape.constant(Tensor::full(n, d, 1.0))?;
    match s {
        Some(s) if tape.value(s).dims() == (n, d) => Ok(s),
        // a constant row (no activation anywhere) broadcast over the batch
        Some(s) => tape.mul(ones, s),
        None => Ok(ones),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.2, -0.4, 1.0])).unwrap();
        for retain in [false, true] {
            let (_, g) = vjp_sum_outputs(&mut tape, &SubNetwork::default(), x, retain).unwrap();
            assert_eq!(tape.value(g).data(), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn linear_map_gives_column_sums() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -5.0]]).unwrap();
        for retain in [false, true] {
            let mut tape = Tape::new();
            let w = tape.param(a.clone()).unwrap();
            let b = tape.param(Tensor::zeros(1, 2)).unwrap();
            let f = SubNetwork::new(vec![DenseVars { w, b, act: None }]);
            let x = tape
                .param(Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 4.0]]).unwrap())
                .unwrap();
            let (_, g) = vjp_sum_outputs(&mut tape, &f, x, retain).unwrap();
            assert_eq!(tape.value(g).data(), &[4.0, -3.0, 4.0, -3.0]);
        }
    }

    #[test]
    fn non_square_map_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(3, 2)).unwrap();
        let b = tape.param(Tensor::zeros(1, 3)).unwrap();
        let f = SubNetwork::new(vec![DenseVars { w, b, act: None }]);
        let x = tape.constant(Tensor::row(&[0.0, 1.0])).unwrap();
        assert!(vjp_sum_outputs(&mut tape, &f, x, false).is_err());
    }
}
