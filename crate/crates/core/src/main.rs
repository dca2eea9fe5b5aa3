use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradres::blocks::VariantKind;
use gradres::harness::{
    dataset_for_seed, dump_learned_function, format_float, run_rows, run_sweep, seed_scores,
    test_grid, train_run, write_function_csv, Preset, SweepConfig, SweepOptions, RUNS_HEADER,
};
use gradres::theory::run_campaign;

/// Gradient residual connections: training sweeps on the piecewise-sinusoid
/// task and numerical checks of gradient reversal.
#[derive(Parser)]
#[command(name = "gradres", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one (configuration, seed) pair of a sweep grid and print its curve.
    Train(TrainArgs),
    /// Run, or resume, a full sweep into a directory.
    Sweep(SweepArgs),
    /// Randomized plane-wave checks of the reversal bound, one JSON line per trial.
    VerifyTheory(TheoryArgs),
    /// Write the training set of one seed index (or the test grid) as CSV.
    DumpDataset(DatasetArgs),
    /// Retrain the first seed of each best configuration and write its fit.
    DumpFunction(FunctionArgs),
    /// Print the resolved sweep config as JSON.
    ShowConfig(ConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct ConfigArgs {
    /// Sweep config JSON; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
}

impl ConfigArgs {
    fn load(&self) -> Result<SweepConfig> {
        match &self.config {
            Some(p) => Ok(SweepConfig::load(p)?),
            None => Ok(match self.preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            }
            .config()),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    algorithm: VariantKind,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long)]
    lr: f64,
    /// Required by kinds that take an α initialisation.
    #[arg(long, allow_hyphen_values = true)]
    alpha_init: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed_index: usize,
    /// Directory for runs.csv; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Parallel runs; defaults to the number of CPUs.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed_index: usize,
    /// Write the noiseless evaluation grid instead of the training set.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FunctionArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep directory; runs it holds are reused and missing ones computed.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Restrict to these algorithms.
    #[arg(long, value_delimiter = ',')]
    algorithm: Vec<VariantKind>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::VerifyTheory(a) => cmd_theory(a),
        Command::DumpDataset(a) => cmd_dataset(a),
        Command::DumpFunction(a) => cmd_function(a),
        Command::ShowConfig(a) => {
            println!("{}", a.load()?.to_json());
            Ok(())
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn options(workers: Option<usize>, progress: bool) -> SweepOptions {
    let mut o = SweepOptions {
        progress,
        ..SweepOptions::default()
    };
    if let Some(w) = workers {
        o.workers = w.max(1);
    }
    o
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let alpha = a.alpha_init.filter(|_| a.algorithm.takes_alpha_init());
    if a.algorithm.takes_alpha_init() && alpha.is_none() {
        bail!("{} needs --alpha-init", a.algorithm);
    }
    let index = cfg
        .run_configs()
        .iter()
        .position(|c| {
            c.algorithm == a.algorithm
                && c.d == a.d
                && c.lr.to_bits() == a.lr.to_bits()
                && c.alpha_init.map(f64::to_bits) == alpha.map(f64::to_bits)
        })
        .context("configuration is not in the sweep grid; pass a --config that contains it")?;
    if a.seed_index >= cfg.n_seeds {
        bail!("seed index {} outside 0..{}", a.seed_index, cfg.n_seeds);
    }
    let (_, rec) = train_run(&cfg, index, a.seed_index)?;
    let mut w = output(a.out.as_ref().map(|d| d.join("runs.csv")).as_deref())?;
    writeln!(w, "{}", RUNS_HEADER.join(","))?;
    for row in run_rows(&rec) {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    eprintln!(
        "{} seed {}: run seed {}, params {}",
        rec.config, rec.seed_index, rec.run_seed, rec.curve.final_params_digest
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let res = run_sweep(&cfg, &a.out, &options(a.workers, !a.quiet))?;
    for b in &res.best {
        let (m, s) = seed_scores(&res.runs_for(&b.config)).final_window();
        println!("best {}: final-window mean {m:.6} ± {s:.6}", b.config);
    }
    for u in &res.unusable {
        println!("unusable {u}: every run diverged");
    }
    Ok(())
}

fn cmd_theory(a: TheoryArgs) -> Result<()> {
    let (records, summary) = run_campaign(a.seed, a.trials);
    let mut w = output(a.out.as_deref())?;
    for r in &records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    writeln!(w, "{}", serde_json::json!({ "summary": summary }))?;
    w.flush()?;
    let violations = summary.bound_violations
        + summary.high_sum_violations
        + summary.grad_floor_violations
        + summary.angle_identity_violations;
    if violations > 0 {
        bail!("{violations} inequality violations");
    }
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let samples = if a.grid {
        test_grid(&cfg)?
    } else {
        dataset_for_seed(&cfg, a.seed_index)?
    };
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "x,y,y_star")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{}",
            format_float(s.x),
            format_float(s.y),
            format_float(s.y_star)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_function(a: FunctionArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if !a.algorithm.is_empty() && a.out.join("sweep_config.json").exists() {
        bail!("--algorithm cannot narrow an existing sweep directory");
    }
    if !a.algorithm.is_empty() {
        cfg.algorithms = a.algorithm.clone();
    }
    let res = run_sweep(&cfg, &a.out, &options(a.workers, true))?;
    let configs = cfg.run_configs();
    let grid = test_grid(&cfg)?;
    for b in &res.best {
        let index = configs
            .iter()
            .position(|c| c.key() == b.config.key())
            .expect("best config comes from the grid");
        let (model, _) = train_run(&cfg, index, 0)?;
        let rows = dump_learned_function(&model, &grid)?;
        let path = a.out.join(format!(
            "function_{}_d{}.csv",
            b.config.algorithm, b.config.d
        ));
        write_function_csv(&path, &rows)?;
        println!("{}: {}", b.config, path.display());
    }
    Ok(())
}
