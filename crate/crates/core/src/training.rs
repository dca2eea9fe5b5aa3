//! The three-hidden-layer regression model and its SGD loop.
//!
//! ```text
//! x ─ Linear(1→d) ─ φ ─┬─ F: Linear(d→d) ─ φ ─ Linear(d→d) ─┐
//!                      └──────────── residual block ────────┴─ φ ─ Linear(·→1)
//! ```
//!
//! The block wraps the map from the first hidden representation to the
//! pre-activation of the third, and its gradient term is taken with respect
//! to the first hidden representation. For the magnitude variant the final
//! activation is applied to `[F(x), ‖g‖₂]`, so the output layer reads `d + 1`
//! features.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Activation, AutodiffError, DenseVars, SubNetwork, Tape, Tensor, Var};
use crate::blocks::{block_forward, BlockError, ResidualBlock, ResidualVariantSpec, VariantKind};
use crate::synthdata::{splitmix64, Rng, Sample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Weight and bias of one dense layer, `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `out x in`
    pub w: Tensor,
    /// `1 x out`
    pub b: Tensor,
}

impl LinearLayer {
    /// Weights uniform on `±1/√fan_in`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            w: Tensor::new(vec![fan_out, fan_in], data).expect("sized above"),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub activation: Activation,
    pub variant: ResidualVariantSpec,
    pub weight_init_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub input: LinearLayer,
    pub hidden2: LinearLayer,
    pub hidden3: LinearLayer,
    pub output: LinearLayer,
    pub block: ResidualBlock,
}

pub fn build_model(spec: &ModelSpec) -> Result<Model, TrainError> {
    let d = spec.hidden_dim;
    if d == 0 {
        return Err(TrainError::InvalidSpec(
            "hidden_dim must be positive".into(),
        ));
    }
    let block = ResidualBlock::new(spec.variant.clone(), d)?;
    let mut rng = Rng::new(spec.weight_init_seed);
    let out_in = if spec.variant.kind == VariantKind::GradMagnitudeConcat {
        d + 1
    } else {
        d
    };
    Ok(Model {
        input: LinearLayer::init(1, d, &mut rng),
        hidden2: LinearLayer::init(d, d, &mut rng),
        hidden3: LinearLayer::init(d, d, &mut rng),
        output: LinearLayer::init(out_in, 1, &mut rng),
        block,
        spec: spec.clone(),
    })
}

struct ModelVars {
    all: Vec<Var>,
    prediction: Var,
}

impl Model {
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in [&self.input, &self.hidden2, &self.hidden3, &self.output] {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.extend(self.block.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in [
            &mut self.input,
            &mut self.hidden2,
            &mut self.hidden3,
            &mut self.output,
        ] {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.extend(self.block.parameters_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records the forward pass for a `n x 1` batch of inputs.
    fn record(&self, tape: &mut Tape, xs: Var) -> Result<ModelVars, TrainError> {
        let act = self.spec.activation;
        let mut all = Vec::new();
        let mut layer = |l: &LinearLayer, tape: &mut Tape| -> Result<(Var, Var), AutodiffError> {
            let w = tape.param(l.w.clone())?;
            let b = tape.param(l.b.clone())?;
            all.push(w);
            all.push(b);
            Ok((w, b))
        };
        let (w1, b1) = layer(&self.input, tape)?;
        let (w2, b2) = layer(&self.hidden2, tape)?;
        let (w3, b3) = layer(&self.hidden3, tape)?;
        let (w4, b4) = layer(&self.output, tape)?;
        let (block_vars, block_all) = self.block.register(tape)?;
        all.extend(block_all);

        let a1 = tape.linear(xs, w1, Some(b1))?;
        let h1 = tape.activation(a1, act)?;
        let f = SubNetwork::new(vec![
            DenseVars {
                w: w2,
                b: b2,
                act: Some(act),
            },
            DenseVars {
                w: w3,
                b: b3,
                act: None,
            },
        ]);
        let out = block_forward(tape, &self.spec.variant, &block_vars, &f, h1)?;
        let pre = match out.grad_magnitude {
            Some(m) => tape.concat(out.h, m)?,
            None => out.h,
        };
        let z = tape.activation(pre, act)?;
        let prediction = tape.linear(z, w4, Some(b4))?;
        Ok(ModelVars { all, prediction })
    }

    pub fn predict(&self, xs: &[f64]) -> Result<Vec<f64>, TrainError> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(xs))?;
        let vars = self.record(&mut tape, x)?;
        Ok(tape.value(vars.prediction).data().to_vec())
    }

    /// Mean squared error on a batch and its gradient for every parameter,
    /// in [`Model::parameters`] order.
    pub fn loss_and_gradients(&self, batch: &[Sample]) -> Result<(f64, Vec<Tensor>), TrainError> {
        self.loss_and_gradients_on(&mut Tape::new(), batch)
    }

    /// [`Model::loss_and_gradients`] recorded on a caller-owned tape, which
    /// is reset first so its buffers can be reused across minibatches.
    pub fn loss_and_gradients_on(
        &self,
        tape: &mut Tape,
        batch: &[Sample],
    ) -> Result<(f64, Vec<Tensor>), TrainError> {
        tape.reset();
        let xs: Vec<f64> = batch.iter().map(|s| s.x).collect();
        let ys: Vec<f64> = batch.iter().map(|s| s.y).collect();
        let x = tape.constant(Tensor::column(&xs))?;
        let t = tape.constant(Tensor::column(&ys))?;
        let vars = self.record(tape, x)?;
        let loss = mse_node(tape, vars.prediction, t)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let out = vars.all.iter().map(|&v| grads.wrt(v)).collect();
        tape.recycle(grads);
        Ok((value, out))
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.parameters() {
            for v in p.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// `mean((prediction - target)²)` on the tape.
pub fn mse_node(tape: &mut Tape, prediction: Var, target: Var) -> Result<Var, AutodiffError> {
    let n = tape.value(prediction).len();
    let diff = tape.sub(prediction, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `θ ← θ − lr·∇θ` for each parameter.
pub fn sgd_step(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
    for (p, g) in params.into_iter().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

pub fn evaluate_mse(model: &Model, grid: &[Sample]) -> Result<f64, TrainError> {
    let xs: Vec<f64> = grid.iter().map(|s| s.x).collect();
    let pred = model.predict(&xs)?;
    Ok(mse(&pred, grid))
}

pub(crate) fn mse(pred: &[f64], grid: &[Sample]) -> f64 {
    let n = grid.len().max(1) as f64;
    pred.iter()
        .zip(grid)
        .map(|(p, s)| (p - s.y_star).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    /// Seeds the shuffling stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03125,
            batch_size: 512,
            epochs: 5000,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "bad learning rate {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Epochs at which test MSE is recorded: 0, every `eval_every`, and the
    /// last epoch.
    pub fn eval_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..=self.epochs).step_by(self.eval_every).collect();
        if s.last() != Some(&self.epochs) {
            s.push(self.epochs);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub eval_epochs: Vec<usize>,
    pub test_mse: Vec<f64>,
    /// Epoch in which training produced a non-finite value.
    pub diverged_at: Option<usize>,
    pub final_params_digest: String,
}

impl LearningCurve {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Minibatch SGD on the mean squared error.
///
/// Every epoch reshuffles the sample order and sweeps `⌈N / batch⌉`
/// minibatches, keeping the short last one. Test MSE is recorded per
/// [`TrainConfig::eval_schedule`]. A non-finite loss, gradient, or parameter
/// stops the run and is reported through [`LearningCurve::diverged_at`].
pub fn train(
    model: &mut Model,
    dataset: &[Sample],
    test_grid: &[Sample],
    cfg: &TrainConfig,
) -> Result<LearningCurve, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = Rng::new(splitmix64(cfg.seed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut tape = Tape::new();
    let schedule = cfg.eval_schedule();
    let mut next_eval = schedule.iter().copied().peekable();

    let mut curve = LearningCurve {
        eval_epochs: Vec::with_capacity(schedule.len()),
        test_mse: Vec::with_capacity(schedule.len()),
        diverged_at: None,
        final_params_digest: String::new(),
    };

    'epochs: for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| dataset[i]));
                let step = model.loss_and_gradients_on(&mut tape, &batch);
                let (loss, grads) = match step {
                    Ok(v) => v,
                    Err(TrainError::Autodiff(AutodiffError::NonFinite(_)))
                    | Err(TrainError::Block(BlockError::Autodiff(AutodiffError::NonFinite(_)))) => {
                        curve.diverged_at = Some(epoch);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    curve.diverged_at = Some(epoch);
                    break 'epochs;
                }
                sgd_step(model.parameters_mut(), &grads, cfg.lr);
                if model.parameters().iter().any(|p| !p.is_finite()) {
                    curve.diverged_at = Some(epoch);
                    break 'epochs;
                }
            }
        }
        if next_eval.peek() == Some(&epoch) {
            next_eval.next();
            match evaluate_mse(model, test_grid) {
                Ok(m) if m.is_finite() => {
                    curve.eval_epochs.push(epoch);
                    curve.test_mse.push(m);
                }
                Ok(_)
                | Err(TrainError::Autodiff(AutodiffError::NonFinite(_)))
                | Err(TrainError::Block(BlockError::Autodiff(AutodiffError::NonFinite(_)))) => {
                    curve.diverged_at = Some(epoch);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    curve.final_params_digest = model.digest();
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_test_grid, SinDatasetConfig};

    fn spec(kind: VariantKind, d: usize, alpha: f64, seed: u64) -> ModelSpec {
        ModelSpec {
            hidden_dim: d,
            activation: Activation::Tanh,
            variant: ResidualVariantSpec::for_width(kind, d, alpha),
            weight_init_seed: seed,
        }
    }

    #[test]
    fn parameter_counts() {
        let m = build_model(&spec(VariantKind::Regular, 16, 0.0, 1)).unwrap();
        assert_eq!(m.parameter_count(), 593);
        let m = build_model(&spec(VariantKind::GradMagnitudeConcat, 16, 0.0, 1)).unwrap();
        assert_eq!(m.parameter_count(), 594);
        assert_eq!(m.output.in_dim(), 17);
        let m = build_model(&spec(VariantKind::ConvexCombined, 16, 3.0, 1)).unwrap();
        assert_eq!(m.parameter_count(), 594);
        let m = build_model(&spec(VariantKind::SampleDependentScalars, 16, 3.0, 1)).unwrap();
        assert_eq!(m.parameter_count(), 593 + 2 * 17);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = build_model(&spec(VariantKind::Regular, 16, 0.0, 4)).unwrap();
        let b = build_model(&spec(VariantKind::Regular, 16, 0.0, 4)).unwrap();
        assert_eq!(a, b);
        assert!(a.hidden2.w.data().iter().all(|v| v.abs() <= 0.25));
        assert!(a.hidden2.b.data().iter().all(|&v| v == 0.0));
        let c = build_model(&spec(VariantKind::Regular, 16, 0.0, 5)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(build_model(&spec(VariantKind::Regular, 0, 0.0, 0)).is_err());
    }

    #[test]
    fn schedule_includes_start_and_end() {
        let cfg = TrainConfig {
            epochs: 120,
            eval_every: 50,
            ..Default::default()
        };
        assert_eq!(cfg.eval_schedule(), vec![0, 50, 100, 120]);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(cfg.eval_schedule(), vec![0]);
    }

    #[test]
    fn one_sgd_step_on_a_linear_model() {
        // y = w x + b, loss = mean((y - t)²) over two points
        let (w0, b0, lr) = (0.5, -0.25, 0.1);
        let xs = [1.0, 3.0];
        let ts = [2.0, -1.0];
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(w0)).unwrap();
        let b = tape.param(Tensor::scalar(b0)).unwrap();
        let x = tape.constant(Tensor::column(&xs)).unwrap();
        let t = tape.constant(Tensor::column(&ts)).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        let loss = mse_node(&mut tape, y, t).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut wt = Tensor::scalar(w0);
        let mut bt = Tensor::scalar(b0);
        sgd_step(vec![&mut wt, &mut bt], &[g.wrt(w), g.wrt(b)], lr);

        let r: Vec<f64> = xs.iter().zip(ts).map(|(x, t)| w0 * x + b0 - t).collect();
        let dw = (2.0 * r[0] * xs[0] + 2.0 * r[1] * xs[1]) / 2.0;
        let db = (2.0 * r[0] + 2.0 * r[1]) / 2.0;
        assert!((wt.item().unwrap() - (w0 - lr * dw)).abs() <= 1e-12);
        assert!((bt.item().unwrap() - (b0 - lr * db)).abs() <= 1e-12);
    }

    #[test]
    fn zero_epochs_gives_initial_evaluation_only() {
        let data = crate::synthdata::generate_dataset(&SinDatasetConfig {
            n: 64,
            ..Default::default()
        })
        .unwrap();
        let grid = generate_test_grid(101, -4.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI)
            .unwrap();
        let mut m = build_model(&spec(VariantKind::ConvexCombined, 8, 3.0, 2)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let c = train(&mut m, &data, &grid, &cfg).unwrap();
        assert_eq!(c.eval_epochs, vec![0]);
        assert_eq!(c.test_mse.len(), 1);
    }

    #[test]
    fn zero_learning_rate_keeps_mse_constant() {
        let data = crate::synthdata::generate_dataset(&SinDatasetConfig {
            n: 100,
            ..Default::default()
        })
        .unwrap();
        let grid = generate_test_grid(51, -4.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI)
            .unwrap();
        let mut m = build_model(&spec(VariantKind::GradOnly, 8, 0.0, 2)).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 6,
            eval_every: 2,
            batch_size: 32,
            seed: 1,
        };
        let c = train(&mut m, &data, &grid, &cfg).unwrap();
        assert_eq!(c.test_mse.len(), 4);
        assert!(c.test_mse.iter().all(|&v| v == c.test_mse[0]));
    }

    #[test]
    fn constant_offset_mse() {
        let grid = generate_test_grid(11, -1.0, 1.0).unwrap();
        let pred: Vec<f64> = grid.iter().map(|s| s.y_star + 0.3).collect();
        assert!((mse(&pred, &grid) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn invalid_train_config_rejected() {
        let cfg = TrainConfig {
            lr: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn huge_learning_rate_marks_divergence() {
        let data = crate::synthdata::generate_dataset(&SinDatasetConfig {
            n: 256,
            ..Default::default()
        })
        .unwrap();
        let grid = generate_test_grid(21, -4.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI)
            .unwrap();
        let mut m = build_model(&spec(VariantKind::Standard, 8, 0.0, 3)).unwrap();
        let cfg = TrainConfig {
            lr: 1e200,
            epochs: 20,
            eval_every: 1,
            batch_size: 64,
            seed: 0,
        };
        let c = train(&mut m, &data, &grid, &cfg).unwrap();
        assert!(c.diverged());
        assert!(c.test_mse.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(c.eval_epochs.len(), c.test_mse.len());
    }
}
