//! Append-only operation record and reverse accumulation.
//!
//! Every primitive is recorded as a [`Node`] holding its forward value and
//! the ids of its inputs. Inputs always precede the node that consumes them,
//! so a single reverse sweep over the node list visits everything in a valid
//! topological order. Nothing is shared between tapes; build a fresh one per
//! minibatch.

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities with first and second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sin,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Relu => z.max(0.0),
            Activation::Sin => z.sin(),
        }
    }

    /// First derivative. relu'(0) is taken as 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = tanh(z);
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sin => z.cos(),
        }
    }

    /// Second derivative, when the engine knows how to differentiate
    /// [`Activation::derivative`]. relu'' is zero almost everywhere and is
    /// taken as exactly zero.
    pub fn second_derivative(self, z: f64) -> Option<f64> {
        match self {
            Activation::Tanh => {
                let t = tanh(z);
                Some(-2.0 * t * (1.0 - t * t))
            }
            Activation::Relu => Some(0.0),
            Activation::Sin => Some(-z.sin()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sin => "sin",
        }
    }
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `1 x c` repeated over rows.
    Row,
    /// `r x 1` repeated over columns.
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ + b` with `x: n x in`, `w: out x in`, `b: 1 x out`.
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// `a · w` with `a: n x out`, `w: out x in`; the transposed product.
    MatMul {
        a: usize,
        w: usize,
    },
    /// `wᵀ · 1`, reported as a `1 x in` row.
    ColSum {
        w: usize,
    },
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Sub {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    /// `scale * x + shift` for constants.
    Affine {
        x: usize,
        scale: f64,
    },
    Act {
        x: usize,
        act: Activation,
    },
    ActDeriv {
        x: usize,
        act: Activation,
    },
    Sigmoid {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    SumAll {
        x: usize,
    },
    /// Row-wise Euclidean norm, `n x c -> n x 1`.
    RowNorm {
        x: usize,
    },
    /// Row-wise `x / (‖x‖ + eps)`.
    NormalizeRows {
        x: usize,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 3] {
        match *self {
            Op::Leaf => [None, None, None],
            Op::Linear { x, w, b } => [Some(x), Some(w), b],
            Op::MatMul { a, w } => [Some(a), Some(w), None],
            Op::ColSum { w } => [Some(w), None, None],
            Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => {
                [Some(a), Some(b), None]
            }
            Op::Concat { a, b } => [Some(a), Some(b), None],
            Op::Affine { x, .. }
            | Op::Act { x, .. }
            | Op::ActDeriv { x, .. }
            | Op::Sigmoid { x }
            | Op::SumAll { x }
            | Op::RowNorm { x }
            | Op::NormalizeRows { x, .. } => [Some(x), None, None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<(usize, usize)>,
}

impl Gradients {
    /// `∂loss/∂var`; zero when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let (r, c) = self.dims[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

/// Most buffers a tape keeps between recordings.
const POOL_LIMIT: usize = 512;

/// Reverse-mode differentiation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Buffers released by [`Tape::reset`] and [`Tape::recycle`].
    pool: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Drops every node but keeps their storage for the next recording.
    pub fn reset(&mut self) {
        let pool = &mut self.pool;
        pool.extend(self.nodes.drain(..).map(|n| n.value.into_data()));
        pool.truncate(POOL_LIMIT);
    }

    /// Hands the buffers of a finished [`Gradients`] back to the tape.
    pub fn recycle(&mut self, grads: Gradients) {
        self.pool.extend(grads.grads.into_iter().flatten());
        self.pool.truncate(POOL_LIMIT);
    }

    fn alloc(&mut self, len: usize) -> Vec<f64> {
        take_buffer(&mut self.pool, len)
    }

    fn zeroed(&mut self, len: usize) -> Vec<f64> {
        let mut y = self.alloc(len);
        y.resize(len, 0.0);
        y
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that is never differentiated by [`Tape::backward`].
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(Op::Leaf, value, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (n, fan_in) = self.dims(x);
        let (out, w_in) = self.dims(w);
        if fan_in != w_in {
            return Err(AutodiffError::ShapeMismatch(format!(
                "linear: input has {fan_in} features, weight expects {w_in}"
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != (1, out) {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "linear: bias {:?} does not match {out} outputs",
                    self.dims(b)
                )));
            }
        }
        let mut y = self.zeroed(n * out);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xr = &xv[i * fan_in..(i + 1) * fan_in];
            let yr = &mut y[i * out..(i + 1) * out];
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = dot(xr, &wv[o * fan_in..(o + 1) * fan_in]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for yr in y.chunks_mut(out) {
                for (yo, bo) in yr.iter_mut().zip(bv) {
                    *yo += bo;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            Tensor::from_parts(n, out, y),
            rg,
        )
    }

    /// Matrix-vector product of a single matrix with a vector, returning a
    /// `1 x rows(w)` row.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, AutodiffError> {
        if self.dims(x).0 != 1 {
            return Err(AutodiffError::ShapeMismatch(
                "matvec: vector operand must be a single row".into(),
            ));
        }
        self.linear(x, w, None)
    }

    /// `a · w`: maps `n x out` through the transpose of an `out x in` weight.
    pub fn matmul_transposed(&mut self, a: Var, w: Var) -> Result<Var, AutodiffError> {
        let (n, out) = self.dims(a);
        let (w_out, fan_in) = self.dims(w);
        if out != w_out {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul: {out} columns against {w_out} weight rows"
            )));
        }
        let mut y = self.zeroed(n * fan_in);
        let av = self.value(a).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let yr = &mut y[i * fan_in..(i + 1) * fan_in];
            for o in 0..out {
                axpy(av[i * out + o], &wv[o * fan_in..(o + 1) * fan_in], yr);
            }
        }
        let rg = self.rg(&[a, w]);
        self.push(
            Op::MatMul { a: a.0, w: w.0 },
            Tensor::from_parts(n, fan_in, y),
            rg,
        )
    }

    /// Column sums `wᵀ·1` of an `out x in` matrix, as a `1 x in` row.
    pub fn col_sum(&mut self, w: Var) -> Result<Var, AutodiffError> {
        let (out, fan_in) = self.dims(w);
        let wv = self.value(w).data();
        let mut y = vec![0.0; fan_in];
        for o in 0..out {
            axpy(1.0, &wv[o * fan_in..(o + 1) * fan_in], &mut y);
        }
        let rg = self.rg(&[w]);
        self.push(Op::ColSum { w: w.0 }, Tensor::from_parts(1, fan_in, y), rg)
    }

    fn broadcast(&self, a: Var, b: Var, what: &str) -> Result<Broadcast, AutodiffError> {
        let (r, c) = self.dims(a);
        let bd = self.dims(b);
        Ok(if bd == (r, c) {
            Broadcast::Same
        } else if bd == (1, 1) {
            Broadcast::Scalar
        } else if bd == (1, c) {
            Broadcast::Row
        } else if bd == (r, 1) {
            Broadcast::Col
        } else {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{what}: cannot combine {:?} with {:?}",
                (r, c),
                bd
            )));
        })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var, AutodiffError> {
        let bc = self.broadcast(a, b, what)?;
        let (r, c) = self.dims(a);
        let mut y = self.alloc(r * c);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        match bc {
            Broadcast::Same => y.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            Broadcast::Scalar => y.extend(av.iter().map(|&x| f(x, bv[0]))),
            Broadcast::Row => y.extend(
                av.chunks(c.max(1))
                    .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            ),
            Broadcast::Col => {
                for i in 0..r {
                    y.extend(av[i * c..(i + 1) * c].iter().map(|&x| f(x, bv[i])));
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(mk(a.0, b.0, bc), Tensor::from_parts(r, c, y), rg)
    }

    /// `a + b`; `b` may be a row, column, or scalar broadcast against `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        let y = self
            .value(x)
            .data()
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            Op::Affine { x: x.0, scale },
            Tensor::from_parts(r, c, y),
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var, AutodiffError> {
        self.affine(x, scale, 0.0)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        let mut y = self.alloc(r * c);
        y.extend(self.value(x).data().iter().map(|&v| act.apply(v)));
        let rg = self.rg(&[x]);
        self.push(Op::Act { x: x.0, act }, Tensor::from_parts(r, c, y), rg)
    }

    /// Pointwise `act'(x)`, itself differentiable through `act''`.
    pub fn activation_derivative(&mut self, x: Var, act: Activation) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        let y = self
            .value(x)
            .data()
            .iter()
            .map(|&v| act.derivative(v))
            .collect();
        let rg = self.rg(&[x]);
        if rg && act.second_derivative(0.0).is_none() {
            return Err(AutodiffError::NoSecondDerivative(act.name()));
        }
        self.push(
            Op::ActDeriv { x: x.0, act },
            Tensor::from_parts(r, c, y),
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        let y = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid { x: x.0 }, Tensor::from_parts(r, c, y), rg)
    }

    /// Column-wise concatenation of two tensors with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat: {ra} rows against {rb}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            y.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            y.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Op::Concat { a: a.0, b: b.0 },
            Tensor::from_parts(ra, ca + cb, y),
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::SumAll { x: x.0 }, Tensor::scalar(s), rg)
    }

    /// Euclidean norm of each row.
    pub fn row_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let y = (0..r).map(|i| norm(&xv[i * c..(i + 1) * c])).collect();
        let rg = self.rg(&[x]);
        self.push(Op::RowNorm { x: x.0 }, Tensor::from_parts(r, 1, y), rg)
    }

    /// Each row divided by `‖row‖₂ + eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        let y = normalize_rows(self.value(x).data(), r, c, eps);
        let rg = self.rg(&[x]);
        self.push(
            Op::NormalizeRows { x: x.0, eps },
            Tensor::from_parts(r, c, y),
            rg,
        )
    }

    /// Reverse accumulation from a scalar loss into every node that requires
    /// a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.dims(loss) != (1, 1) {
            return Err(AutodiffError::NotScalar(self.dims(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut pool = std::mem::take(&mut self.pool);
        let needs = |j: usize| self.nodes[j].requires_grad;
        let swept = self.sweep(loss.0, 0, &needs, &mut grads, &mut pool);
        self.pool = pool;
        swept?;
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims()).collect(),
        })
    }

    /// Vector-Jacobian product `seedᵀ · ∂output/∂wrt`, evaluated without
    /// recording anything. Only nodes recorded after `wrt` are traversed, so
    /// parameters created earlier receive nothing.
    pub fn vjp(&mut self, output: Var, seed: &Tensor, wrt: Var) -> Result<Tensor, AutodiffError> {
        if seed.dims() != self.dims(output) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "vjp: seed {:?} against output {:?}",
                seed.dims(),
                self.dims(output)
            )));
        }
        let (r, c) = self.dims(wrt);
        if wrt.0 > output.0 {
            return Ok(Tensor::zeros(r, c));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let mut pool = std::mem::take(&mut self.pool);
        let mut s = take_buffer(&mut pool, seed.len());
        s.extend_from_slice(seed.data());
        grads[output.0] = Some(s);
        let needs = |j: usize| j >= wrt.0;
        let swept = self.sweep(output.0, wrt.0 + 1, &needs, &mut grads, &mut pool);
        let g = grads[wrt.0].take();
        pool.extend(grads.into_iter().flatten());
        self.pool = pool;
        swept?;
        Ok(match g {
            Some(g) => Tensor::from_parts(r, c, g),
            None => Tensor::zeros(r, c),
        })
    }

    fn sweep(
        &self,
        from: usize,
        down_to: usize,
        needs: &dyn Fn(usize) -> bool,
        grads: &mut [Option<Vec<f64>>],
        pool: &mut Vec<Vec<f64>>,
    ) -> Result<(), AutodiffError> {
        for i in (down_to..=from).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.op.inputs().iter().flatten().any(|&j| j >= i) {
                return Err(AutodiffError::CorruptTape(i));
            }
            self.backprop_node(i, &gout, needs, grads, pool);
            grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &[f64],
        needs: &dyn Fn(usize) -> bool,
        grads: &mut [Option<Vec<f64>>],
        pool: &mut Vec<Vec<f64>>,
    ) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let dims = |j: usize| self.nodes[j].value.dims();
        match node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, fan_in) = dims(x);
                let out = dims(w).0;
                if needs(x) {
                    let wv = val(w);
                    let gx = slot(grads, pool, x, n * fan_in);
                    for r in 0..n {
                        let gxr = &mut gx[r * fan_in..(r + 1) * fan_in];
                        for o in 0..out {
                            axpy(gout[r * out + o], &wv[o * fan_in..(o + 1) * fan_in], gxr);
                        }
                    }
                }
                if needs(w) {
                    let xv = val(x);
                    let gw = slot(grads, pool, w, out * fan_in);
                    for r in 0..n {
                        let xr = &xv[r * fan_in..(r + 1) * fan_in];
                        for o in 0..out {
                            axpy(gout[r * out + o], xr, &mut gw[o * fan_in..(o + 1) * fan_in]);
                        }
                    }
                }
                if let Some(b) = b {
                    if needs(b) {
                        let gb = slot(grads, pool, b, out);
                        for gr in gout.chunks(out) {
                            axpy(1.0, gr, gb);
                        }
                    }
                }
            }
            Op::MatMul { a, w } => {
                let (n, out) = dims(a);
                let fan_in = dims(w).1;
                if needs(a) {
                    let wv = val(w);
                    let ga = slot(grads, pool, a, n * out);
                    for r in 0..n {
                        let gr = &gout[r * fan_in..(r + 1) * fan_in];
                        for o in 0..out {
                            ga[r * out + o] += dot(gr, &wv[o * fan_in..(o + 1) * fan_in]);
                        }
                    }
                }
                if needs(w) {
                    let av = val(a);
                    let gw = slot(grads, pool, w, out * fan_in);
                    for r in 0..n {
                        let gr = &gout[r * fan_in..(r + 1) * fan_in];
                        for o in 0..out {
                            axpy(av[r * out + o], gr, &mut gw[o * fan_in..(o + 1) * fan_in]);
                        }
                    }
                }
            }
            Op::ColSum { w } => {
                if needs(w) {
                    let (out, fan_in) = dims(w);
                    let gw = slot(grads, pool, w, out * fan_in);
                    for row in gw.chunks_mut(fan_in) {
                        axpy(1.0, gout, row);
                    }
                }
            }
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                let (r, c) = dims(a);
                if needs(a) {
                    axpy(1.0, gout, slot(grads, pool, a, r * c));
                }
                if needs(b) {
                    let nb = self.nodes[b].value.len();
                    let gb = slot(grads, pool, b, nb);
                    if bc == Broadcast::Same {
                        axpy(sign, gout, gb);
                        return;
                    }
                    for i in 0..r {
                        for j in 0..c {
                            gb[bc_index(bc, i, j, c)] += sign * gout[i * c + j];
                        }
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let (r, c) = dims(a);
                let av = val(a);
                let bv = val(b);
                if needs(a) {
                    let ga = slot(grads, pool, a, r * c);
                    if bc == Broadcast::Same {
                        for ((g, &go), &y) in ga.iter_mut().zip(gout).zip(bv) {
                            *g += go * y;
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += gout[i * c + j] * bv[bc_index(bc, i, j, c)];
                            }
                        }
                    }
                }
                if needs(b) {
                    let gb = slot(grads, pool, b, bv.len());
                    if bc == Broadcast::Same {
                        for ((g, &go), &x) in gb.iter_mut().zip(gout).zip(av) {
                            *g += go * x;
                        }
                        return;
                    }
                    for i in 0..r {
                        for j in 0..c {
                            gb[bc_index(bc, i, j, c)] += gout[i * c + j] * av[i * c + j];
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if needs(x) {
                    axpy(scale, gout, slot(grads, pool, x, gout.len()));
                }
            }
            Op::Act { x, act } => {
                if needs(x) {
                    let xv = val(x);
                    let yv = node.value.data();
                    let gx = slot(grads, pool, x, gout.len());
                    if act == Activation::Tanh {
                        for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(yv) {
                            *g += go * (1.0 - y * y);
                        }
                    } else {
                        for k in 0..gout.len() {
                            gx[k] += gout[k] * act.derivative(xv[k]);
                        }
                    }
                }
            }
            Op::ActDeriv { x, act } => {
                if needs(x) {
                    let xv = val(x);
                    let gx = slot(grads, pool, x, gout.len());
                    for k in 0..gout.len() {
                        // registered at record time
                        let d2 = act.second_derivative(xv[k]).unwrap_or(0.0);
                        gx[k] += gout[k] * d2;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs(x) {
                    let yv = node.value.data();
                    let gx = slot(grads, pool, x, gout.len());
                    for k in 0..gout.len() {
                        gx[k] += gout[k] * yv[k] * (1.0 - yv[k]);
                    }
                }
            }
            Op::Concat { a, b } => {
                let (r, ca) = dims(a);
                let cb = dims(b).1;
                let c = ca + cb;
                if needs(a) {
                    let ga = slot(grads, pool, a, r * ca);
                    for i in 0..r {
                        axpy(1.0, &gout[i * c..i * c + ca], &mut ga[i * ca..(i + 1) * ca]);
                    }
                }
                if needs(b) {
                    let gb = slot(grads, pool, b, r * cb);
                    for i in 0..r {
                        axpy(
                            1.0,
                            &gout[i * c + ca..(i + 1) * c],
                            &mut gb[i * cb..(i + 1) * cb],
                        );
                    }
                }
            }
            Op::SumAll { x } => {
                if needs(x) {
                    let n = self.nodes[x].value.len();
                    let g = gout[0];
                    for v in slot(grads, pool, x, n).iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::RowNorm { x } => {
                if needs(x) {
                    let (r, c) = dims(x);
                    let xv = val(x);
                    let nv = node.value.data();
                    let gx = slot(grads, pool, x, r * c);
                    for i in 0..r {
                        // subgradient 0 at the origin
                        if nv[i] > 0.0 {
                            axpy(
                                gout[i] / nv[i],
                                &xv[i * c..(i + 1) * c],
                                &mut gx[i * c..(i + 1) * c],
                            );
                        }
                    }
                }
            }
            Op::NormalizeRows { x, eps } => {
                if needs(x) {
                    let (r, c) = dims(x);
                    let xv = val(x);
                    let gx = slot(grads, pool, x, r * c);
                    for i in 0..r {
                        let xr = &xv[i * c..(i + 1) * c];
                        let gr = &gout[i * c..(i + 1) * c];
                        let n = norm(xr);
                        let denom = n + eps;
                        let gxr = &mut gx[i * c..(i + 1) * c];
                        axpy(1.0 / denom, gr, gxr);
                        if n > 0.0 {
                            let proj = dot(gr, xr);
                            axpy(-proj / (denom * denom * n), xr, gxr);
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::MatMul { .. } => "matmul",
        Op::ColSum { .. } => "col_sum",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::Act { .. } => "activation",
        Op::ActDeriv { .. } => "activation_derivative",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Concat { .. } => "concat",
        Op::SumAll { .. } => "sum_all",
        Op::RowNorm { .. } => "row_norm",
        Op::NormalizeRows { .. } => "normalize_rows",
    }
}

#[inline]
fn bc_index(bc: Broadcast, i: usize, j: usize, c: usize) -> usize {
    match bc {
        Broadcast::Same => i * c + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    pool: &mut Vec<Vec<f64>>,
    j: usize,
    len: usize,
) -> &'g mut [f64] {
    grads[j].get_or_insert_with(|| {
        let mut g = take_buffer(pool, len);
        g.resize(len, 0.0);
        g
    })
}

/// An empty buffer with room for `len` values, reused when one is pooled.
fn take_buffer(pool: &mut Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    match pool.pop() {
        Some(mut v) => {
            v.clear();
            v.reserve(len);
            v
        }
        None => Vec::with_capacity(len),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    for i in 0..n {
        y[i] += alpha * x[i];
    }
}

/// `tanh` through a single `exp`; absolute error stays at a few ulps of 1,
/// which is all training needs, and it is markedly cheaper than libm's.
#[inline]
fn tanh(z: f64) -> f64 {
    if z.abs() < 0.0625 {
        // odd series; the exp form would cancel badly here
        let z2 = z * z;
        return z
            * (1.0
                + z2 * (-1.0 / 3.0
                    + z2 * (2.0 / 15.0
                        + z2 * (-17.0 / 315.0
                            + z2 * (62.0 / 2835.0 - z2 * (1382.0 / 155925.0))))));
    }
    let e = (-2.0 * z.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `x / (‖x‖ + eps)` on raw data.
fn normalize_rows(x: &[f64], r: usize, c: usize, eps: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for i in 0..r {
        let row = &mut y[i * c..(i + 1) * c];
        let s = 1.0 / (norm(row) + eps);
        row.iter_mut().for_each(|v| *v *= s);
    }
    y
}
