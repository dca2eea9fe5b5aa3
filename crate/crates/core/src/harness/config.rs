use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::autodiff::Activation;
use crate::blocks::{ResidualVariantSpec, VariantKind};
use crate::synthdata::SinDatasetConfig;
use crate::training::TrainConfig;

pub const LR_GRID: [f64; 4] = [0.125, 0.03125, 0.0078125, 0.001953125];
pub const ALPHA_INIT_GRID: [f64; 2] = [-3.0, 3.0];
pub const SUPPORTED_WIDTHS: [usize; 3] = [16, 32, 64];

/// How the best `(lr, α-init)` of an algorithm is picked from mean curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Mean of the last quarter of evaluations.
    FinalWindowMean,
    /// Lowest single evaluation.
    BestEval,
}

/// Everything a sweep needs. Parsed from JSON; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub algorithms: Vec<VariantKind>,
    pub d_grid: Vec<usize>,
    pub lr_grid: Vec<f64>,
    /// Used only by kinds that take an α initialisation.
    pub alpha_init_grid: Vec<f64>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub activation: Activation,
    /// Points in the noiseless evaluation grid over `[x_min, x_max]`.
    pub n_test: usize,
    /// `dataset.seed` is mixed with the seed index; each seed index gets
    /// its own draw, shared by every configuration.
    pub dataset: SinDatasetConfig,
    pub normalize_grad: bool,
    pub grad_retain: bool,
    pub selection: Criterion,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// The two shipped sweep sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn config(self) -> SweepConfig {
        match self {
            Preset::Desk => SweepConfig::desk(),
            Preset::Paper => SweepConfig::paper(),
        }
    }
}

impl SweepConfig {
    /// Six algorithms at width 16, 10 seeds, 2000 epochs.
    pub fn desk() -> Self {
        Self {
            algorithms: vec![
                VariantKind::Regular,
                VariantKind::GradOnly,
                VariantKind::StandardTrainableScalar,
                VariantKind::ConvexCombined,
                VariantKind::Addition,
                VariantKind::GradMagnitudeConcat,
            ],
            d_grid: vec![16],
            lr_grid: LR_GRID.to_vec(),
            alpha_init_grid: ALPHA_INIT_GRID.to_vec(),
            n_seeds: 10,
            base_seed: 0,
            epochs: 2000,
            eval_every: 50,
            batch_size: 512,
            activation: Activation::Tanh,
            n_test: 1001,
            dataset: SinDatasetConfig::default(),
            normalize_grad: true,
            grad_retain: false,
            selection: Criterion::FinalWindowMean,
        }
    }

    /// All three widths, 30 seeds, 5000 epochs, plus the standard residual
    /// without a scalar.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.algorithms.insert(3, VariantKind::Standard);
        cfg.d_grid = SUPPORTED_WIDTHS.to_vec();
        cfg.n_seeds = 30;
        cfg.epochs = 5000;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.algorithms.is_empty() || self.d_grid.is_empty() || self.lr_grid.is_empty() {
            return bad("algorithms, d_grid and lr_grid must be non-empty".into());
        }
        let needs_alpha = self.algorithms.iter().any(|k| k.takes_alpha_init());
        if needs_alpha && self.alpha_init_grid.is_empty() {
            return bad("alpha_init_grid must be non-empty for the chosen algorithms".into());
        }
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1".into());
        }
        if let Some(d) = self.d_grid.iter().find(|d| !SUPPORTED_WIDTHS.contains(d)) {
            return bad(format!("width {d} is not one of {SUPPORTED_WIDTHS:?}"));
        }
        if let Some(lr) = self
            .lr_grid
            .iter()
            .find(|lr| !(lr.is_finite() && **lr > 0.0))
        {
            return bad(format!("learning rate {lr} must be positive and finite"));
        }
        if self.alpha_init_grid.iter().any(|a| !a.is_finite()) {
            return bad("alpha_init_grid must be finite".into());
        }
        if self.n_test < 2 {
            return bad("n_test must be at least 2".into());
        }
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if has_duplicates(&self.algorithms)
            || has_duplicates(&self.d_grid)
            || has_duplicates(&bits(&self.lr_grid))
            || has_duplicates(&bits(&self.alpha_init_grid))
        {
            return bad("grids must not contain duplicates".into());
        }
        self.dataset
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train_config(LR_GRID[0], 0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Every configuration in canonical order: algorithm (as listed), width,
    /// learning rate, then α-init for the kinds that take one. A
    /// configuration's position is its index in run-seed derivation.
    pub fn run_configs(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &algorithm in &self.algorithms {
            for &d in &self.d_grid {
                for &lr in &self.lr_grid {
                    if algorithm.takes_alpha_init() {
                        for &a in &self.alpha_init_grid {
                            out.push(RunConfig {
                                algorithm,
                                d,
                                lr,
                                alpha_init: Some(a),
                            });
                        }
                    } else {
                        out.push(RunConfig {
                            algorithm,
                            d,
                            lr,
                            alpha_init: None,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn train_config(&self, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            eval_every: self.eval_every,
            seed,
        }
    }

    pub fn variant_spec(&self, rc: &RunConfig) -> ResidualVariantSpec {
        let mut spec =
            ResidualVariantSpec::for_width(rc.algorithm, rc.d, rc.alpha_init.unwrap_or(0.0));
        spec.normalize_grad = self.normalize_grad;
        spec.grad_retain = self.grad_retain;
        spec
    }

    pub fn evaluations_per_run(&self) -> usize {
        self.train_config(LR_GRID[0], 0).eval_schedule().len()
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[..i].contains(a))
}

/// One point of the hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: VariantKind,
    pub d: usize,
    pub lr: f64,
    pub alpha_init: Option<f64>,
}

impl RunConfig {
    /// Bit-exact identity, usable as a map key.
    pub fn key(&self) -> (VariantKind, usize, u64, Option<u64>) {
        (
            self.algorithm,
            self.d,
            self.lr.to_bits(),
            self.alpha_init.map(f64::to_bits),
        )
    }
}

impl std::fmt::Display for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} d={} lr={}", self.algorithm, self.d, self.lr)?;
        if let Some(a) = self.alpha_init {
            write!(f, " alpha_init={a}")?;
        }
        Ok(())
    }
}
