use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::Serialize;

use super::io::{self, Appender, RunRow, SummaryRow, AGG_HEADER, RUNS_HEADER, SUMMARY_HEADER};
use super::stats::{
    aggregate, final_window_mean, mean_stderr, select_best, AggregateCurve, BestConfig,
};
use super::{FunctionRow, HarnessError, RunConfig, SweepConfig};
use crate::blocks::VariantKind;
use crate::synthdata::{generate_dataset, generate_test_grid, splitmix64, stable_hash, Sample};
use crate::training::{build_model, train, LearningCurve, Model, ModelSpec};

/// Left edge of the region scored by [`RunRecord::restricted_mse`]; the
/// right edge is the end of the test grid.
const RESTRICTED_FROM: f64 = 0.0;

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub workers: usize,
    /// Print one line per finished run to stderr.
    pub progress: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            progress: false,
        }
    }
}

/// One finished `(configuration, seed)` run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_index: usize,
    pub seed_index: usize,
    pub run_seed: u64,
    pub curve: LearningCurve,
    /// Test MSE over the grid points with `x ≥ 0`, where the target
    /// oscillates fastest. Absent for diverged runs.
    pub restricted_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub config: SweepConfig,
    /// Sorted by configuration index, then seed index.
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<AggregateCurve>,
    /// Configurations whose every run diverged.
    pub unusable: Vec<RunConfig>,
    pub best: Vec<BestConfig>,
}

impl SweepResult {
    pub fn runs_for(&self, config: &RunConfig) -> Vec<&RunRecord> {
        let key = config.key();
        self.runs.iter().filter(|r| r.config.key() == key).collect()
    }

    pub fn best_for(&self, algorithm: VariantKind, d: usize) -> Option<&BestConfig> {
        self.best
            .iter()
            .find(|b| b.config.algorithm == algorithm && b.config.d == d)
    }
}

/// Per-seed scores of one configuration, diverged runs left out.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedScores {
    pub final_window_means: Vec<f64>,
    pub restricted_mses: Vec<f64>,
    pub diverged: usize,
}

impl SeedScores {
    /// Mean and standard error of the per-seed final-window means.
    pub fn final_window(&self) -> (f64, f64) {
        mean_stderr(&self.final_window_means)
    }

    pub fn restricted(&self) -> (f64, f64) {
        mean_stderr(&self.restricted_mses)
    }
}

pub fn seed_scores(runs: &[&RunRecord]) -> SeedScores {
    let kept: Vec<&&RunRecord> = runs.iter().filter(|r| !r.curve.diverged()).collect();
    SeedScores {
        final_window_means: kept
            .iter()
            .map(|r| final_window_mean(&r.curve.test_mse))
            .collect(),
        restricted_mses: kept.iter().filter_map(|r| r.restricted_mse).collect(),
        diverged: runs.len() - kept.len(),
    }
}

/// `splitmix64(base_seed ⊕ stable_hash(config_index, seed_index))`.
pub fn run_seed(base_seed: u64, config_index: usize, seed_index: usize) -> u64 {
    splitmix64(base_seed ^ stable_hash(config_index as u64, seed_index as u64))
}

/// Training set of one seed index. Every configuration sees the same draw
/// for a given seed index.
pub fn dataset_for_seed(cfg: &SweepConfig, seed_index: usize) -> Result<Vec<Sample>, HarnessError> {
    let mut d = cfg.dataset.clone();
    d.seed = stable_hash(cfg.dataset.seed ^ cfg.base_seed, seed_index as u64);
    Ok(generate_dataset(&d)?)
}

pub fn test_grid(cfg: &SweepConfig) -> Result<Vec<Sample>, HarnessError> {
    Ok(generate_test_grid(
        cfg.n_test,
        cfg.dataset.x_min,
        cfg.dataset.x_max,
    )?)
}

/// Test MSE over the grid points in `[lo, hi]`; `None` when there are none.
pub fn restricted_mse(
    model: &Model,
    grid: &[Sample],
    lo: f64,
    hi: f64,
) -> Result<Option<f64>, HarnessError> {
    let pts: Vec<Sample> = grid
        .iter()
        .copied()
        .filter(|s| s.x >= lo && s.x <= hi)
        .collect();
    if pts.is_empty() {
        return Ok(None);
    }
    let xs: Vec<f64> = pts.iter().map(|s| s.x).collect();
    let pred = model.predict(&xs)?;
    let sse: f64 = pred
        .iter()
        .zip(&pts)
        .map(|(p, s)| (p - s.y_star).powi(2))
        .sum();
    Ok(Some(sse / pts.len() as f64))
}

/// Trains configuration `config_index` of `cfg` on seed index
/// `seed_index`, exactly as the sweep does.
pub fn train_run(
    cfg: &SweepConfig,
    config_index: usize,
    seed_index: usize,
) -> Result<(Model, RunRecord), HarnessError> {
    let configs = cfg.run_configs();
    let rc = *configs.get(config_index).ok_or_else(|| {
        HarnessError::Config(format!(
            "configuration {config_index} out of range ({} configurations)",
            configs.len()
        ))
    })?;
    let dataset = dataset_for_seed(cfg, seed_index)?;
    let grid = test_grid(cfg)?;
    train_on(cfg, rc, config_index, seed_index, &dataset, &grid)
}

fn train_on(
    cfg: &SweepConfig,
    rc: RunConfig,
    config_index: usize,
    seed_index: usize,
    dataset: &[Sample],
    grid: &[Sample],
) -> Result<(Model, RunRecord), HarnessError> {
    let seed = run_seed(cfg.base_seed, config_index, seed_index);
    let spec = ModelSpec {
        hidden_dim: rc.d,
        activation: cfg.activation,
        variant: cfg.variant_spec(&rc),
        weight_init_seed: seed,
    };
    let mut model = build_model(&spec)?;
    let curve = train(&mut model, dataset, grid, &cfg.train_config(rc.lr, seed))?;
    let restricted = if curve.diverged() {
        None
    } else {
        restricted_mse(&model, grid, RESTRICTED_FROM, cfg.dataset.x_max)?
    };
    let record = RunRecord {
        config: rc,
        config_index,
        seed_index,
        run_seed: seed,
        curve,
        restricted_mse: restricted,
    };
    Ok((model, record))
}

/// Grid points with the model's prediction next to the noiseless target.
pub fn dump_learned_function(
    model: &Model,
    grid: &[Sample],
) -> Result<Vec<FunctionRow>, HarnessError> {
    let xs: Vec<f64> = grid.iter().map(|s| s.x).collect();
    let pred = model.predict(&xs)?;
    Ok(grid
        .iter()
        .zip(pred)
        .map(|(s, y_pred)| FunctionRow {
            x: s.x,
            y_star: s.y_star,
            y_pred,
        })
        .collect())
}

/// Runs every `(configuration, seed)` pair of `cfg` that `out` does not
/// already hold, then aggregates and selects.
///
/// `runs.csv` and `summary.csv` grow one finished run at a time, so an
/// interrupted sweep resumes where it stopped. Both files are rewritten in
/// canonical order when the sweep completes; the final bytes do not depend
/// on worker count, scheduling, or interruptions.
pub fn run_sweep(
    cfg: &SweepConfig,
    out: &Path,
    opts: &SweepOptions,
) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let cfg_path = out.join("sweep_config.json");
    if cfg_path.exists() {
        let prev = SweepConfig::load(&cfg_path)?;
        if prev != *cfg {
            return Err(HarnessError::Inconsistent(format!(
                "{} was written by a different config",
                out.display()
            )));
        }
    } else {
        fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| HarnessError::io(&cfg_path, e))?;
    }

    let configs = cfg.run_configs();
    let runs_path = out.join("runs.csv");
    let summary_path = out.join("summary.csv");
    let mut done = load_completed(cfg, &configs, &runs_path, &summary_path)?;
    write_canonical(&done, &runs_path, &summary_path)?;

    let pending: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..cfg.n_seeds).map(move |s| (c, s)))
        .filter(|k| !done.contains_key(k))
        .collect();
    let grid = test_grid(cfg)?;
    let total = configs.len() * cfg.n_seeds;

    let mut runs_out = Appender::open(&runs_path)?;
    let mut summary_out = Appender::open(&summary_path)?;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut first_err: Option<HarnessError> = None;
    let (tx, rx) = mpsc::channel::<Result<RunRecord, HarnessError>>();
    std::thread::scope(|scope| {
        for _ in 0..opts.workers.max(1).min(pending.len().max(1)) {
            let tx = tx.clone();
            let (next, stop, pending, configs, grid) = (&next, &stop, &pending, &configs, &grid);
            scope.spawn(move || {
                let mut cached: Option<(usize, Vec<Sample>)> = None;
                while !stop.load(Ordering::Relaxed) {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(ci, si)) = pending.get(k) else {
                        break;
                    };
                    let result = (|| {
                        if cached.as_ref().map(|c| c.0) != Some(si) {
                            cached = Some((si, dataset_for_seed(cfg, si)?));
                        }
                        let data = &cached.as_ref().expect("just filled").1;
                        train_on(cfg, configs[ci], ci, si, data, grid).map(|(_, r)| r)
                    })();
                    if tx.send(result).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for result in rx {
            let outcome = result.and_then(|rec| {
                runs_out.append(&io::run_rows(&rec))?;
                summary_out.append(&[io::summary_row(&rec)])?;
                Ok(rec)
            });
            match outcome {
                Ok(rec) => {
                    if opts.progress {
                        let last = rec.curve.test_mse.last().copied().unwrap_or(f64::NAN);
                        let status = match rec.curve.diverged_at {
                            Some(e) => format!("diverged at epoch {e}"),
                            None => format!("final test mse {last:.5}"),
                        };
                        eprintln!(
                            "[{}/{total}] {} seed {}: {status}",
                            done.len() + 1,
                            rec.config,
                            rec.seed_index
                        );
                    }
                    done.insert((rec.config_index, rec.seed_index), rec);
                }
                Err(e) => {
                    stop.store(true, Ordering::Relaxed);
                    first_err.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    write_canonical(&done, &runs_path, &summary_path)?;

    let runs: Vec<RunRecord> = done.into_values().collect();
    let mut aggregates = Vec::new();
    let mut unusable = Vec::new();
    for (ci, rc) in configs.iter().enumerate() {
        let curves: Vec<&LearningCurve> = runs
            .iter()
            .filter(|r| r.config_index == ci)
            .map(|r| &r.curve)
            .collect();
        match aggregate(*rc, &curves) {
            Ok(a) => aggregates.push(a),
            Err(HarnessError::NoUsableConfig(_)) => unusable.push(*rc),
            Err(e) => return Err(e),
        }
    }
    let agg_rows: Vec<Vec<String>> = aggregates.iter().flat_map(io::agg_rows).collect();
    io::write_csv(&out.join("agg.csv"), &AGG_HEADER, &agg_rows)?;
    let best = select_best(&aggregates, cfg.selection);
    let result = SweepResult {
        config: cfg.clone(),
        runs,
        aggregates,
        unusable,
        best,
    };
    write_best_json(&result, &out.join("best.json"))?;
    Ok(result)
}

/// Completed runs found in `out`. A run counts only once its summary row
/// exists and its evaluation rows are all present.
fn load_completed(
    cfg: &SweepConfig,
    configs: &[RunConfig],
    runs_path: &Path,
    summary_path: &Path,
) -> Result<BTreeMap<(usize, usize), RunRecord>, HarnessError> {
    let index: HashMap<_, usize> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.key(), i))
        .collect();
    let lookup = |rc: RunConfig, seed: usize| -> Result<usize, HarnessError> {
        let ci = *index
            .get(&rc.key())
            .ok_or_else(|| HarnessError::Inconsistent(format!("unknown configuration {rc}")))?;
        if seed >= cfg.n_seeds {
            return Err(HarnessError::Inconsistent(format!(
                "seed index {seed} of {rc}"
            )));
        }
        Ok(ci)
    };

    let mut done = BTreeMap::new();
    let mut expected = HashMap::new();
    for s in io::read_rows::<SummaryRow>(summary_path, &SUMMARY_HEADER)? {
        let ci = lookup(s.config(), s.seed)?;
        expected.insert((ci, s.seed), s.n_evals);
        done.insert(
            (ci, s.seed),
            RunRecord {
                config: configs[ci],
                config_index: ci,
                seed_index: s.seed,
                run_seed: s.run_seed,
                curve: LearningCurve {
                    eval_epochs: Vec::new(),
                    test_mse: Vec::new(),
                    diverged_at: s.diverged_at,
                    final_params_digest: s.params_digest,
                },
                restricted_mse: s.restricted_mse,
            },
        );
    }
    for r in io::read_rows::<RunRow>(runs_path, &RUNS_HEADER)? {
        let ci = lookup(r.config(), r.seed)?;
        if let Some(rec) = done.get_mut(&(ci, r.seed)) {
            if r.diverged == 0 {
                rec.curve.eval_epochs.push(r.epoch);
                rec.curve.test_mse.push(r.test_mse);
            }
        }
    }
    for (k, rec) in &done {
        if rec.curve.test_mse.len() != expected[k] {
            return Err(HarnessError::Inconsistent(format!(
                "{} seed {}: summary lists {} evaluations, runs.csv has {}",
                rec.config,
                rec.seed_index,
                expected[k],
                rec.curve.test_mse.len()
            )));
        }
    }
    Ok(done)
}

fn write_canonical(
    done: &BTreeMap<(usize, usize), RunRecord>,
    runs_path: &Path,
    summary_path: &Path,
) -> Result<(), HarnessError> {
    let runs: Vec<Vec<String>> = done.values().flat_map(io::run_rows).collect();
    let summary: Vec<Vec<String>> = done.values().map(io::summary_row).collect();
    io::write_csv(runs_path, &RUNS_HEADER, &runs)?;
    io::write_csv(summary_path, &SUMMARY_HEADER, &summary)
}

#[derive(Serialize)]
struct BestEntry<'a> {
    #[serde(flatten)]
    best: &'a BestConfig,
    n_effective: usize,
    seed_final_window_mean: f64,
    seed_final_window_stderr: f64,
    seed_restricted_mse_mean: f64,
}

fn write_best_json(result: &SweepResult, path: &Path) -> Result<(), HarnessError> {
    let entries: Vec<BestEntry> = result
        .best
        .iter()
        .map(|b| {
            let scores = seed_scores(&result.runs_for(&b.config));
            let (m, s) = scores.final_window();
            BestEntry {
                best: b,
                n_effective: scores.final_window_means.len(),
                seed_final_window_mean: m,
                seed_final_window_stderr: s,
                seed_restricted_mse_mean: scores.restricted().0,
            }
        })
        .collect();
    // NaN is not JSON; serde_json writes it as null
    let text = serde_json::to_string_pretty(&entries).expect("plain data");
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}
