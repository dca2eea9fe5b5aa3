use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Criterion, HarnessError, RunConfig};
use crate::training::LearningCurve;

/// Mean and standard error of the mean. The values are summed in sorted
/// order so the result does not depend on how they were listed. A single
/// value, or a repeated one, has standard error exactly 0.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    // sum / n need not round back to a repeated value
    if v[0] == v[n - 1] {
        return (v[0], 0.0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Number of trailing evaluations in the final window: a quarter, rounded up.
pub fn final_window_len(n: usize) -> usize {
    n.div_ceil(4).max(1).min(n)
}

pub fn final_window_mean(values: &[f64]) -> f64 {
    let k = final_window_len(values.len());
    let tail = &values[values.len() - k..];
    tail.iter().sum::<f64>() / k as f64
}

/// Seed-averaged learning curve of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub config: RunConfig,
    pub eval_epochs: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Runs that did not diverge.
    pub n_effective: usize,
    pub n_runs: usize,
}

impl AggregateCurve {
    pub fn score(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::FinalWindowMean => final_window_mean(&self.mean),
            Criterion::BestEval => self.mean.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Pointwise mean and standard error over the runs that did not diverge.
pub fn aggregate(
    config: RunConfig,
    curves: &[&LearningCurve],
) -> Result<AggregateCurve, HarnessError> {
    let kept: Vec<&LearningCurve> = curves.iter().copied().filter(|c| !c.diverged()).collect();
    let Some(first) = kept.first() else {
        return Err(HarnessError::NoUsableConfig(format!(
            "all {} runs of {config} diverged",
            curves.len()
        )));
    };
    if let Some(bad) = kept.iter().find(|c| c.eval_epochs != first.eval_epochs) {
        return Err(HarnessError::Inconsistent(format!(
            "{config}: evaluation schedules differ ({} vs {} points)",
            first.eval_epochs.len(),
            bad.eval_epochs.len()
        )));
    }
    let mut mean = Vec::with_capacity(first.eval_epochs.len());
    let mut stderr = Vec::with_capacity(first.eval_epochs.len());
    for k in 0..first.eval_epochs.len() {
        let column: Vec<f64> = kept.iter().map(|c| c.test_mse[k]).collect();
        let (m, s) = mean_stderr(&column);
        mean.push(m);
        stderr.push(s);
    }
    Ok(AggregateCurve {
        config,
        eval_epochs: first.eval_epochs.clone(),
        mean,
        stderr,
        n_effective: kept.len(),
        n_runs: curves.len(),
    })
}

/// The chosen configuration of one algorithm at one width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub config: RunConfig,
    pub criterion: Criterion,
    pub score: f64,
}

/// Argmin of the criterion per `(algorithm, d)`, in first-seen order. Ties
/// go to the smaller learning rate, then the smaller α-init.
pub fn select_best(aggregates: &[AggregateCurve], criterion: Criterion) -> Vec<BestConfig> {
    let mut best: Vec<BestConfig> = Vec::new();
    for agg in aggregates {
        let cand = BestConfig {
            config: agg.config,
            criterion,
            score: agg.score(criterion),
        };
        let same_group = |b: &BestConfig| {
            b.config.algorithm == agg.config.algorithm && b.config.d == agg.config.d
        };
        match best.iter_mut().find(|b| same_group(b)) {
            None => best.push(cand),
            Some(cur) => {
                if better(&cand, cur) {
                    *cur = cand;
                }
            }
        }
    }
    best
}

fn better(a: &BestConfig, b: &BestConfig) -> bool {
    let alpha = |c: &BestConfig| c.config.alpha_init.unwrap_or(f64::NEG_INFINITY);
    a.score
        .total_cmp(&b.score)
        .then(a.config.lr.total_cmp(&b.config.lr))
        .then(alpha(a).total_cmp(&alpha(b)))
        == Ordering::Less
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::VariantKind;

    fn rc(lr: f64, alpha: Option<f64>) -> RunConfig {
        RunConfig {
            algorithm: VariantKind::ConvexCombined,
            d: 16,
            lr,
            alpha_init: alpha,
        }
    }

    fn curve(values: &[f64]) -> LearningCurve {
        LearningCurve {
            eval_epochs: (0..values.len()).map(|k| k * 50).collect(),
            test_mse: values.to_vec(),
            diverged_at: None,
            final_params_digest: String::new(),
        }
    }

    fn agg_with_final(lr: f64, alpha: Option<f64>, v: f64) -> AggregateCurve {
        aggregate(rc(lr, alpha), &[&curve(&[1.0, v])]).unwrap()
    }

    #[test]
    fn one_two_three() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 0.577_350_269_189_625_7).abs() < 1e-15);
    }

    #[test]
    fn single_run_has_zero_stderr() {
        let c = curve(&[0.5, 0.25]);
        let a = aggregate(rc(0.1, None), &[&c]).unwrap();
        assert_eq!(a.mean, c.test_mse);
        assert_eq!(a.stderr, vec![0.0, 0.0]);
        assert_eq!(a.n_effective, 1);
    }

    #[test]
    fn identical_runs_have_zero_stderr() {
        let c = curve(&[0.3, 0.2, 0.1]);
        let a = aggregate(rc(0.1, None), &[&c, &c, &c]).unwrap();
        assert_eq!(a.stderr, vec![0.0; 3]);
        assert_eq!(a.mean, c.test_mse);
    }

    #[test]
    fn diverged_runs_excluded() {
        let ok = curve(&[0.4, 0.2]);
        let mut bad = curve(&[0.4]);
        bad.diverged_at = Some(30);
        let a = aggregate(rc(0.1, None), &[&ok, &bad]).unwrap();
        assert_eq!((a.n_effective, a.n_runs), (1, 2));
        assert!(matches!(
            aggregate(rc(0.1, None), &[&bad]),
            Err(HarnessError::NoUsableConfig(_))
        ));
    }

    #[test]
    fn mismatched_schedules_rejected() {
        let a = curve(&[0.4, 0.2]);
        let b = curve(&[0.4, 0.2, 0.1]);
        assert!(aggregate(rc(0.1, None), &[&a, &b]).is_err());
    }

    #[test]
    fn aggregation_ignores_seed_order() {
        let cs: Vec<LearningCurve> = [0.1, 0.7, 1e-9, 3.3, 0.2]
            .iter()
            .map(|&v| curve(&[v, v / 3.0]))
            .collect();
        let fwd: Vec<&LearningCurve> = cs.iter().collect();
        let rev: Vec<&LearningCurve> = cs.iter().rev().collect();
        assert_eq!(
            aggregate(rc(0.1, None), &fwd).unwrap(),
            aggregate(rc(0.1, None), &rev).unwrap()
        );
    }

    #[test]
    fn final_window_is_last_quarter_rounded_up() {
        assert_eq!(final_window_len(41), 11);
        assert_eq!(final_window_len(101), 26);
        assert_eq!(final_window_len(4), 1);
        assert_eq!(final_window_len(1), 1);
        assert_eq!(final_window_mean(&[9.0, 9.0, 9.0, 1.0, 3.0]), 2.0);
    }

    #[test]
    fn single_config_selects_itself() {
        let a = agg_with_final(0.1, Some(3.0), 0.3);
        let best = select_best(std::slice::from_ref(&a), Criterion::FinalWindowMean);
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].config, a.config);
    }

    #[test]
    fn lower_score_wins() {
        let aggs = [
            agg_with_final(0.1, Some(3.0), 0.30),
            agg_with_final(0.2, Some(3.0), 0.05),
        ];
        let best = select_best(&aggs, Criterion::FinalWindowMean);
        assert_eq!(best[0].config.lr, 0.2);
        assert_eq!(best[0].score, 0.05);
    }

    #[test]
    fn ties_go_to_smaller_lr_then_alpha() {
        let aggs = [
            agg_with_final(0.5, Some(-3.0), 0.1),
            agg_with_final(0.125, Some(3.0), 0.1),
            agg_with_final(0.125, Some(-3.0), 0.1),
        ];
        for order in [[0, 1, 2], [2, 1, 0], [1, 0, 2]] {
            let shuffled: Vec<AggregateCurve> = order.iter().map(|&i| aggs[i].clone()).collect();
            let best = select_best(&shuffled, Criterion::FinalWindowMean);
            assert_eq!(best[0].config, rc(0.125, Some(-3.0)));
        }
    }

    #[test]
    fn best_eval_uses_minimum() {
        let a = aggregate(rc(0.1, None), &[&curve(&[0.9, 0.01, 0.5])]).unwrap();
        assert_eq!(a.score(Criterion::BestEval), 0.01);
        assert_eq!(a.score(Criterion::FinalWindowMean), 0.5);
    }
}
