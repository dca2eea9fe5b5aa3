//! Residual block variants around a sub-network `F: ℝᵈ → ℝᵈ`.
//!
//! Writing `ĝ` for the (optionally normalized) Jacobian row sum of `F` at the
//! block input `x`:
//!
//! | kind                         | output                               |
//! |------------------------------|--------------------------------------|
//! | `regular`                    | `F(x)`                               |
//! | `standard`                   | `F(x) + x`                           |
//! | `standard_trainable_scalar`  | `F(x) + β·x`                         |
//! | `grad_only`                  | `F(x) + ĝ`                           |
//! | `addition`                   | `F(x) + x + ĝ`                       |
//! | `convex_combined`            | `F(x) + (1 − σ(α))·x + σ(α)·ĝ`       |
//! | `grad_magnitude_concat`      | `F(x)`, plus `‖g‖₂` for concatenation |
//! | `independent_scalars`        | `F(x) + σ(β)·x + σ(α)·ĝ`             |
//! | `sample_dependent_scalars`   | `F(x) + σ(β(x))·x + σ(α(x))·ĝ`       |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{vjp_sum_outputs, AutodiffError, SubNetwork, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("unknown residual variant {0:?}")]
    UnknownKind(String),
    #[error("variant {kind} {problem}")]
    InvalidScalars { kind: VariantKind, problem: String },
    #[error("block input has {got} features, heads expect {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Regular,
    Standard,
    StandardTrainableScalar,
    GradOnly,
    Addition,
    ConvexCombined,
    GradMagnitudeConcat,
    IndependentScalars,
    SampleDependentScalars,
}

impl VariantKind {
    pub const ALL: [VariantKind; 9] = [
        VariantKind::Regular,
        VariantKind::Standard,
        VariantKind::StandardTrainableScalar,
        VariantKind::GradOnly,
        VariantKind::Addition,
        VariantKind::ConvexCombined,
        VariantKind::GradMagnitudeConcat,
        VariantKind::IndependentScalars,
        VariantKind::SampleDependentScalars,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Regular => "regular",
            VariantKind::Standard => "standard",
            VariantKind::StandardTrainableScalar => "standard_trainable_scalar",
            VariantKind::GradOnly => "grad_only",
            VariantKind::Addition => "addition",
            VariantKind::ConvexCombined => "convex_combined",
            VariantKind::GradMagnitudeConcat => "grad_magnitude_concat",
            VariantKind::IndependentScalars => "independent_scalars",
            VariantKind::SampleDependentScalars => "sample_dependent_scalars",
        }
    }

    /// Carries a global trainable α.
    pub fn has_alpha(self) -> bool {
        matches!(
            self,
            VariantKind::ConvexCombined | VariantKind::IndependentScalars
        )
    }

    /// Carries a global trainable β.
    pub fn has_beta(self) -> bool {
        matches!(
            self,
            VariantKind::StandardTrainableScalar | VariantKind::IndependentScalars
        )
    }

    pub fn has_heads(self) -> bool {
        self == VariantKind::SampleDependentScalars
    }

    /// Whether an initial α (or head bias) is swept for this kind.
    pub fn takes_alpha_init(self) -> bool {
        self.has_alpha() || self.has_heads()
    }

    /// Needs the Jacobian row sum of `F`.
    pub fn uses_gradient(self) -> bool {
        !matches!(
            self,
            VariantKind::Regular | VariantKind::Standard | VariantKind::StandardTrainableScalar
        )
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = BlockError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BlockError::UnknownKind(s.to_string()))
    }
}

pub const DEFAULT_NORM_EPSILON: f64 = 1e-8;

/// Which residual formula a block uses, and how its gradient term is formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualVariantSpec {
    pub kind: VariantKind,
    /// Initial α, or the initial head bias for sample-dependent scalars.
    pub alpha_init: Option<f64>,
    /// Initial β, or the initial β-head bias for sample-dependent scalars.
    pub beta_init: Option<f64>,
    pub normalize_grad: bool,
    /// Keep the gradient term on the tape so training differentiates it.
    pub grad_retain: bool,
    pub norm_epsilon: f64,
}

impl ResidualVariantSpec {
    /// The spec used by the sweeps for width `d`. `alpha_init` is ignored by
    /// kinds without α. The standard trainable scalar starts at `1/√d`;
    /// independent and sample-dependent scalars start β at the same value
    /// as α.
    pub fn for_width(kind: VariantKind, d: usize, alpha_init: f64) -> Self {
        let alpha = kind.takes_alpha_init().then_some(alpha_init);
        let beta = match kind {
            VariantKind::StandardTrainableScalar => Some(1.0 / (d as f64).sqrt()),
            VariantKind::IndependentScalars | VariantKind::SampleDependentScalars => {
                Some(alpha_init)
            }
            _ => None,
        };
        Self {
            kind,
            alpha_init: alpha,
            beta_init: beta,
            normalize_grad: true,
            grad_retain: false,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        let bad = |problem: &str| {
            Err(BlockError::InvalidScalars {
                kind: self.kind,
                problem: problem.to_string(),
            })
        };
        let wants_alpha = self.kind.takes_alpha_init();
        let wants_beta = self.kind.has_beta() || self.kind.has_heads();
        match (wants_alpha, self.alpha_init) {
            (true, None) => return bad("needs alpha_init"),
            (false, Some(_)) => return bad("carries no alpha"),
            (true, Some(a)) if !a.is_finite() => return bad("has non-finite alpha_init"),
            _ => {}
        }
        match (wants_beta, self.beta_init) {
            (true, None) => return bad("needs beta_init"),
            (false, Some(_)) => return bad("carries no beta"),
            (true, Some(b)) if !b.is_finite() => return bad("has non-finite beta_init"),
            _ => {}
        }
        if !(self.norm_epsilon >= 0.0 && self.norm_epsilon.is_finite()) {
            return bad("has an invalid norm_epsilon");
        }
        Ok(())
    }
}

/// Per-sample gate `σ(wᵀx + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScalarHead {
    /// `1 x d`
    pub w: Tensor,
    /// `1 x 1`
    pub c: Tensor,
}

impl SampleScalarHead {
    /// Zero weights, so every sample starts with the gate `σ(c)`.
    pub fn new(d: usize, c: f64) -> Self {
        Self {
            w: Tensor::zeros(1, d),
            c: Tensor::scalar(c),
        }
    }
}

/// Trainable state of a residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub spec: ResidualVariantSpec,
    pub alpha: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub alpha_head: Option<SampleScalarHead>,
    pub beta_head: Option<SampleScalarHead>,
}

impl ResidualBlock {
    pub fn new(spec: ResidualVariantSpec, d: usize) -> Result<Self, BlockError> {
        spec.validate()?;
        let k = spec.kind;
        let heads = k.has_heads();
        Ok(Self {
            alpha: k
                .has_alpha()
                .then(|| Tensor::scalar(spec.alpha_init.unwrap_or_default())),
            beta: k
                .has_beta()
                .then(|| Tensor::scalar(spec.beta_init.unwrap_or_default())),
            alpha_head: heads
                .then(|| SampleScalarHead::new(d, spec.alpha_init.unwrap_or_default())),
            beta_head: heads.then(|| SampleScalarHead::new(d, spec.beta_init.unwrap_or_default())),
            spec,
        })
    }

    /// Trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.extend(self.alpha.as_ref());
        out.extend(self.beta.as_ref());
        for h in [&self.alpha_head, &self.beta_head].into_iter().flatten() {
            out.push(&h.w);
            out.push(&h.c);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.extend(self.alpha.as_mut());
        out.extend(self.beta.as_mut());
        for h in [&mut self.alpha_head, &mut self.beta_head]
            .into_iter()
            .flatten()
        {
            out.push(&mut h.w);
            out.push(&mut h.c);
        }
        out
    }

    /// Places the parameters on `tape`, in [`ResidualBlock::parameters`]
    /// order, and returns them with their roles.
    pub fn register(&self, tape: &mut Tape) -> Result<(BlockVars, Vec<Var>), BlockError> {
        let mut all = Vec::new();
        let mut put = |t: &Tensor, tape: &mut Tape| -> Result<Var, AutodiffError> {
            let v = tape.param(t.clone())?;
            all.push(v);
            Ok(v)
        };
        let alpha = self.alpha.as_ref().map(|t| put(t, tape)).transpose()?;
        let beta = self.beta.as_ref().map(|t| put(t, tape)).transpose()?;
        let mut heads = Vec::new();
        for h in [&self.alpha_head, &self.beta_head].into_iter().flatten() {
            let w = put(&h.w, tape)?;
            let c = put(&h.c, tape)?;
            heads.push(HeadVars { w, c });
        }
        let mut heads = heads.into_iter();
        let vars = BlockVars {
            alpha,
            beta,
            alpha_head: heads.next(),
            beta_head: heads.next(),
        };
        Ok((vars, all))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub c: Var,
}

/// Block parameters as tape nodes.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockVars {
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub alpha_head: Option<HeadVars>,
    pub beta_head: Option<HeadVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub h: Var,
    pub f_out: Var,
    /// The raw row sum `g`, when the variant computed it.
    pub grad: Option<Var>,
    /// `‖g‖₂` per sample, for the magnitude variant.
    pub grad_magnitude: Option<Var>,
}

/// `ĝ = g / (‖g‖₂ + eps)` when normalizing, else `g`, for
/// `g = Σᵢ ∇Fᵢ(x)`. Returns the forward trace output `F(x)`, `g`, and `ĝ`.
pub fn grad_residual_term(
    tape: &mut Tape,
    f: &SubNetwork,
    x: Var,
    spec: &ResidualVariantSpec,
) -> Result<(Var, Var, Var), BlockError> {
    let (trace, g) = vjp_sum_outputs(tape, f, x, spec.grad_retain)?;
    let g_hat = if spec.normalize_grad {
        tape.normalize_rows(g, spec.norm_epsilon)?
    } else {
        g
    };
    Ok((trace.output, g, g_hat))
}

fn gate(tape: &mut Tape, x: Var, head: HeadVars) -> Result<Var, AutodiffError> {
    let z = tape.linear(x, head.w, Some(head.c))?;
    tape.sigmoid(z)
}

pub fn block_forward(
    tape: &mut Tape,
    spec: &ResidualVariantSpec,
    vars: &BlockVars,
    f: &SubNetwork,
    x: Var,
) -> Result<BlockOutput, BlockError> {
    use VariantKind::*;

    let missing = |what: &str| BlockError::InvalidScalars {
        kind: spec.kind,
        problem: format!("was registered without {what}"),
    };

    if !spec.kind.uses_gradient() {
        let f_out = f.forward(tape, x)?.output;
        let h = match spec.kind {
            Regular => f_out,
            Standard => tape.add(f_out, x)?,
            _ => {
                let beta = vars.beta.ok_or_else(|| missing("beta"))?;
                let bx = tape.mul(x, beta)?;
                tape.add(f_out, bx)?
            }
        };
        return Ok(BlockOutput {
            h,
            f_out,
            grad: None,
            grad_magnitude: None,
        });
    }

    if let Some(head) = vars.alpha_head {
        let expected = tape.value(head.w).cols();
        let got = tape.value(x).cols();
        if expected != got {
            return Err(BlockError::DimensionMismatch { expected, got });
        }
    }

    let (f_out, g, g_hat) = grad_residual_term(tape, f, x, spec)?;
    let mut grad_magnitude = None;
    let h = match spec.kind {
        GradOnly => tape.add(f_out, g_hat)?,
        Addition => {
            let fx = tape.add(f_out, x)?;
            tape.add(fx, g_hat)?
        }
        ConvexCombined => {
            let alpha = vars.alpha.ok_or_else(|| missing("alpha"))?;
            let s = tape.sigmoid(alpha)?;
            let one_minus = tape.affine(s, -1.0, 1.0)?;
            let id = tape.mul(x, one_minus)?;
            let gr = tape.mul(g_hat, s)?;
            let fx = tape.add(f_out, id)?;
            tape.add(fx, gr)?
        }
        IndependentScalars => {
            let alpha = vars.alpha.ok_or_else(|| missing("alpha"))?;
            let beta = vars.beta.ok_or_else(|| missing("beta"))?;
            let sa = tape.sigmoid(alpha)?;
            let sb = tape.sigmoid(beta)?;
            let id = tape.mul(x, sb)?;
            let gr = tape.mul(g_hat, sa)?;
            let fx = tape.add(f_out, id)?;
            tape.add(fx, gr)?
        }
        SampleDependentScalars => {
            let ah = vars.alpha_head.ok_or_else(|| missing("alpha head"))?;
            let bh = vars.beta_head.ok_or_else(|| missing("beta head"))?;
            let sa = gate(tape, x, ah)?;
            let sb = gate(tape, x, bh)?;
            let id = tape.mul(x, sb)?;
            let gr = tape.mul(g_hat, sa)?;
            let fx = tape.add(f_out, id)?;
            tape.add(fx, gr)?
        }
        GradMagnitudeConcat => {
            grad_magnitude = Some(tape.row_norm(g)?);
            f_out
        }
        Regular | Standard | StandardTrainableScalar => unreachable!(),
    };
    Ok(BlockOutput {
        h,
        f_out,
        grad: Some(g),
        grad_magnitude,
    })
}
