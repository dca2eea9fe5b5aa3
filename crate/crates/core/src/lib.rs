//! Gradient-based residual connections for multilayer perceptrons.
//!
//! A residual block normally adds its input back to the output of the
//! wrapped map, `h = F(x) + x`. The blocks here can also add the Jacobian
//! row sum `Σᵢ ∇Fᵢ(x)`, normalized to unit length, which points in opposite
//! directions at nearby points of a rapidly oscillating function.
//!
//! - [`autodiff`]: dense tensors, a reverse-mode tape, and the row-sum VJP.
//! - [`blocks`]: every residual variant.
//! - [`theory`]: exact plane-wave checks of the gradient reversal bound.
//! - [`synthdata`]: the piecewise sinusoid regression set and a portable PRNG.
//! - [`training`]: the three-hidden-layer model, minibatch SGD, test MSE.
//! - [`harness`]: sweeps, aggregation, CSV output, and the CLI plumbing.

pub mod autodiff;
pub mod blocks;
pub mod harness;
pub mod synthdata;
pub mod theory;
pub mod training;
