use std::fs;
use std::path::Path;

use gradres::blocks::VariantKind;
use gradres::harness::{
    restricted_mse, run_sweep, test_grid, train_run, HarnessError, Preset, SweepConfig,
    SweepOptions,
};
use gradres::synthdata::SinDatasetConfig;

fn small() -> SweepConfig {
    SweepConfig {
        algorithms: vec![VariantKind::Regular, VariantKind::ConvexCombined],
        lr_grid: vec![0.125, 0.03125],
        n_seeds: 2,
        epochs: 20,
        eval_every: 5,
        n_test: 101,
        dataset: SinDatasetConfig {
            n: 300,
            ..SinDatasetConfig::default()
        },
        ..SweepConfig::default()
    }
}

fn opts(workers: usize) -> SweepOptions {
    SweepOptions {
        workers,
        progress: false,
    }
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

const OUTPUTS: [&str; 5] = [
    "runs.csv",
    "summary.csv",
    "agg.csv",
    "best.json",
    "sweep_config.json",
];

#[test]
fn zero_epoch_single_run_gives_one_row() {
    let cfg = SweepConfig {
        algorithms: vec![VariantKind::Regular],
        lr_grid: vec![0.125],
        n_seeds: 1,
        epochs: 0,
        ..small()
    };
    let dir = tempfile::tempdir().unwrap();
    let res = run_sweep(&cfg, dir.path(), &opts(1)).unwrap();
    assert_eq!(res.runs.len(), 1);
    let runs = read(dir.path(), "runs.csv");
    let lines: Vec<&str> = runs.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "algorithm,d,lr,alpha_init,seed,epoch,test_mse,diverged"
    );
    assert!(lines[1].starts_with("regular,16,1.2500000000000000e-1,,0,0,"));
    assert_eq!(read(dir.path(), "agg.csv").lines().count(), 2);
    assert_eq!(res.best.len(), 1);
}

#[test]
fn row_count_matches_grid() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let res = run_sweep(&cfg, dir.path(), &opts(2)).unwrap();
    let runs = cfg.run_configs().len() * cfg.n_seeds;
    assert_eq!(res.runs.len(), runs);
    assert_eq!(
        read(dir.path(), "runs.csv").lines().count(),
        1 + runs * cfg.evaluations_per_run()
    );
    assert_eq!(read(dir.path(), "summary.csv").lines().count(), 1 + runs);
    assert_eq!(
        read(dir.path(), "agg.csv").lines().count(),
        1 + cfg.run_configs().len() * cfg.evaluations_per_run()
    );
    assert_eq!(res.best.len(), 2);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_sweep(&cfg, a.path(), &opts(1)).unwrap();
    run_sweep(&cfg, b.path(), &opts(3)).unwrap();
    for f in OUTPUTS {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn interrupted_sweep_resumes_to_identical_files() {
    let cfg = small();
    let whole = tempfile::tempdir().unwrap();
    run_sweep(&cfg, whole.path(), &opts(2)).unwrap();

    // keep five finished runs, plus a torn tail of rows from an unfinished one
    let cut = tempfile::tempdir().unwrap();
    let summary = read(whole.path(), "summary.csv");
    let kept: Vec<&str> = summary.lines().take(6).collect();
    fs::write(cut.path().join("summary.csv"), kept.join("\n") + "\n").unwrap();
    let runs = read(whole.path(), "runs.csv");
    let keep_rows = 1 + 5 * cfg.evaluations_per_run() + 2;
    let mut partial: String = runs
        .lines()
        .take(keep_rows)
        .map(|l| format!("{l}\n"))
        .collect();
    partial.push_str("convex_combined,16,1.25");
    fs::write(cut.path().join("runs.csv"), partial).unwrap();
    fs::copy(
        whole.path().join("sweep_config.json"),
        cut.path().join("sweep_config.json"),
    )
    .unwrap();

    let res = run_sweep(&cfg, cut.path(), &opts(2)).unwrap();
    assert_eq!(res.runs.len(), cfg.run_configs().len() * cfg.n_seeds);
    for f in OUTPUTS {
        assert_eq!(read(whole.path(), f), read(cut.path(), f), "{f}");
    }
    // a complete directory is left untouched
    run_sweep(&cfg, cut.path(), &opts(1)).unwrap();
    assert_eq!(read(whole.path(), "runs.csv"), read(cut.path(), "runs.csv"));
}

#[test]
fn directory_from_another_config_is_rejected() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    run_sweep(
        &SweepConfig {
            epochs: 0,
            ..cfg.clone()
        },
        dir.path(),
        &opts(1),
    )
    .unwrap();
    let err = run_sweep(&cfg, dir.path(), &opts(1)).unwrap_err();
    assert!(matches!(err, HarnessError::Inconsistent(_)), "{err}");
}

#[test]
fn single_run_reproduces_sweep_rows() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let res = run_sweep(&cfg, dir.path(), &opts(2)).unwrap();
    let target = &res.runs[7];
    let (model, again) = train_run(&cfg, target.config_index, target.seed_index).unwrap();
    assert_eq!(&again, target);
    let grid = test_grid(&cfg).unwrap();
    let expect = restricted_mse(&model, &grid, 0.0, f64::INFINITY).unwrap();
    assert_eq!(target.restricted_mse, expect);
}

#[test]
fn restricted_mse_uses_only_the_right_half() {
    let cfg = small();
    let (model, _) = train_run(&cfg, 0, 0).unwrap();
    let grid = test_grid(&cfg).unwrap();
    let right: Vec<_> = grid.iter().copied().filter(|s| s.x >= 0.0).collect();
    let pred = model
        .predict(&right.iter().map(|s| s.x).collect::<Vec<_>>())
        .unwrap();
    let manual = pred
        .iter()
        .zip(&right)
        .map(|(p, s)| (p - s.y_star).powi(2))
        .sum::<f64>()
        / right.len() as f64;
    let got = restricted_mse(&model, &grid, 0.0, f64::INFINITY)
        .unwrap()
        .unwrap();
    assert!((got - manual).abs() <= 1e-15 * manual.max(1.0));
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, preset) in [("desk.json", Preset::Desk), ("paper.json", Preset::Paper)] {
        let loaded = SweepConfig::load(&root.join(file)).unwrap();
        assert_eq!(loaded, preset.config(), "{file}");
    }
}
