//! The piecewise-sinusoid regression task.
//!
//! Inputs are uniform on `[-4π, 4π)`. For `x < 0` the target is
//! `sin(0.5x) + 0.5 sin(2.5x)`; for `x ≥ 0` it switches to the faster
//! `sin(2x) + 0.5 sin(7x)`. Training targets carry Gaussian noise, test
//! targets do not.

mod rng;

pub use rng::{splitmix64, stable_hash, Rng};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinDatasetConfig {
    pub n: usize,
    pub noise_std: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub seed: u64,
}

impl Default for SinDatasetConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            noise_std: 0.1,
            x_min: -4.0 * PI,
            x_max: 4.0 * PI,
            seed: 0,
        }
    }
}

impl SinDatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 {
            return Err(DataError::InvalidConfig("n must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::InvalidConfig(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        if !self.x_min.is_finite() || !self.x_max.is_finite() || self.x_min >= self.x_max {
            return Err(DataError::InvalidConfig(format!(
                "need finite x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }
}

/// One labelled point. `y_star` is the noiseless target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub x: f64,
    pub y: f64,
    pub y_star: f64,
}

pub fn ground_truth(x: f64) -> f64 {
    if x < 0.0 {
        (0.5 * x).sin() + 0.5 * (2.5 * x).sin()
    } else {
        (2.0 * x).sin() + 0.5 * (7.0 * x).sin()
    }
}

/// Draws `cfg.n` noisy samples. Each sample takes one uniform for `x`
/// followed by one normal for the noise.
pub fn generate_dataset(cfg: &SinDatasetConfig) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let samples = (0..cfg.n)
        .map(|_| {
            let x = rng.uniform_range(cfg.x_min, cfg.x_max);
            let y_star = ground_truth(x);
            let y = y_star + cfg.noise_std * rng.gaussian();
            Sample { x, y, y_star }
        })
        .collect();
    Ok(samples)
}

/// `n_test` evenly spaced points from `x_min` to `x_max` inclusive, with
/// noiseless targets.
pub fn generate_test_grid(n_test: usize, x_min: f64, x_max: f64) -> Result<Vec<Sample>, DataError> {
    if n_test < 2 {
        return Err(DataError::InvalidGrid(format!(
            "need at least 2 points, got {n_test}"
        )));
    }
    if !x_min.is_finite() || !x_max.is_finite() || x_min >= x_max {
        return Err(DataError::InvalidGrid(format!(
            "bad range [{x_min}, {x_max}]"
        )));
    }
    let step = (x_max - x_min) / (n_test - 1) as f64;
    Ok((0..n_test)
        .map(|i| {
            let x = if i == n_test - 1 {
                x_max
            } else {
                x_min + step * i as f64
            };
            let y_star = ground_truth(x);
            Sample {
                x,
                y: y_star,
                y_star,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_reference_points() {
        assert_eq!(ground_truth(0.0), 0.0);
        assert!((ground_truth(-PI) - (-1.5)).abs() < 1e-12);
        let expected = 1.0 - 0.25 * 2f64.sqrt();
        assert!((ground_truth(PI / 4.0) - expected).abs() < 1e-12);
        assert!((expected - 0.646447).abs() < 1e-6);
    }

    #[test]
    fn noiseless_dataset_matches_truth() {
        let cfg = SinDatasetConfig {
            noise_std: 0.0,
            n: 200,
            ..Default::default()
        };
        for s in generate_dataset(&cfg).unwrap() {
            assert_eq!(s.y, ground_truth(s.x));
        }
    }

    #[test]
    fn single_sample_is_reproducible() {
        let cfg = SinDatasetConfig {
            n: 1,
            seed: 5,
            ..Default::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn noise_statistics() {
        let cfg = SinDatasetConfig {
            seed: 11,
            ..Default::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let res: Vec<f64> = data.iter().map(|s| s.y - s.y_star).collect();
        let n = res.len() as f64;
        let mean = res.iter().sum::<f64>() / n;
        let sd = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 0.006, "mean {mean}");
        assert!((0.094..=0.106).contains(&sd), "sd {sd}");
    }

    #[test]
    fn inputs_pass_ks_uniformity() {
        let cfg = SinDatasetConfig {
            seed: 3,
            ..Default::default()
        };
        let mut xs: Vec<f64> = generate_dataset(&cfg)
            .unwrap()
            .iter()
            .map(|s| s.x)
            .collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let span = cfg.x_max - cfg.x_min;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x - cfg.x_min) / span;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic critical value at alpha = 0.01
        let critical = 1.628 / n.sqrt();
        assert!(d <= critical, "KS statistic {d} > {critical}");
        assert!(xs.iter().all(|&x| x >= cfg.x_min && x < cfg.x_max));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            SinDatasetConfig {
                n: 0,
                ..Default::default()
            },
            SinDatasetConfig {
                noise_std: -1.0,
                ..Default::default()
            },
            SinDatasetConfig {
                x_min: 1.0,
                x_max: 1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(generate_dataset(&cfg).is_err());
        }
    }

    #[test]
    fn grid_endpoints_and_order() {
        let g = generate_test_grid(2, -4.0 * PI, 4.0 * PI).unwrap();
        assert_eq!(g[0].x, -4.0 * PI);
        assert_eq!(g[1].x, 4.0 * PI);
        let g = generate_test_grid(1001, -4.0 * PI, 4.0 * PI).unwrap();
        assert!(g.windows(2).all(|w| w[0].x < w[1].x));
        let mse: f64 = g
            .iter()
            .map(|s| (ground_truth(s.x) - s.y_star).powi(2))
            .sum::<f64>()
            / 1001.0;
        assert_eq!(mse, 0.0);
        assert!(generate_test_grid(1, 0.0, 1.0).is_err());
        assert!(generate_test_grid(5, 1.0, 0.0).is_err());
    }
}
