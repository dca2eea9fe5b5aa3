use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{AggregateCurve, HarnessError, RunConfig, RunRecord};
use crate::blocks::VariantKind;

pub const RUNS_HEADER: [&str; 8] = [
    "algorithm",
    "d",
    "lr",
    "alpha_init",
    "seed",
    "epoch",
    "test_mse",
    "diverged",
];
pub(crate) const SUMMARY_HEADER: [&str; 11] = [
    "algorithm",
    "d",
    "lr",
    "alpha_init",
    "seed",
    "run_seed",
    "n_evals",
    "final_test_mse",
    "restricted_mse",
    "diverged_at",
    "params_digest",
];
pub(crate) const AGG_HEADER: [&str; 8] = [
    "algorithm",
    "d",
    "lr",
    "alpha_init",
    "epoch",
    "mean_test_mse",
    "stderr",
    "n_effective",
];
const FUNCTION_HEADER: [&str; 3] = ["x", "y_star", "y_pred"];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn config_fields(c: &RunConfig) -> [String; 4] {
    [
        c.algorithm.name().to_string(),
        c.d.to_string(),
        format_float(c.lr),
        c.alpha_init.map(format_float).unwrap_or_default(),
    ]
}

/// `runs.csv` rows of one run: its evaluations, followed by a marked row at the divergence
/// epoch when the run blew up.
pub fn run_rows(r: &RunRecord) -> Vec<Vec<String>> {
    let cf = config_fields(&r.config);
    let row = |epoch: usize, mse: f64, diverged: bool| {
        let mut v = cf.to_vec();
        v.extend([
            r.seed_index.to_string(),
            epoch.to_string(),
            format_float(mse),
            u8::from(diverged).to_string(),
        ]);
        v
    };
    let mut rows: Vec<Vec<String>> = r
        .curve
        .eval_epochs
        .iter()
        .zip(&r.curve.test_mse)
        .map(|(&e, &m)| row(e, m, false))
        .collect();
    if let Some(e) = r.curve.diverged_at {
        rows.push(row(e, f64::NAN, true));
    }
    rows
}

pub(crate) fn summary_row(r: &RunRecord) -> Vec<String> {
    let mut v = config_fields(&r.config).to_vec();
    v.extend([
        r.seed_index.to_string(),
        r.run_seed.to_string(),
        r.curve.test_mse.len().to_string(),
        r.curve
            .test_mse
            .last()
            .copied()
            .map(format_float)
            .unwrap_or_default(),
        r.restricted_mse.map(format_float).unwrap_or_default(),
        r.curve
            .diverged_at
            .map(|e| e.to_string())
            .unwrap_or_default(),
        r.curve.final_params_digest.clone(),
    ]);
    v
}

pub(crate) fn agg_rows(a: &AggregateCurve) -> Vec<Vec<String>> {
    let cf = config_fields(&a.config);
    (0..a.eval_epochs.len())
        .map(|k| {
            let mut v = cf.to_vec();
            v.extend([
                a.eval_epochs[k].to_string(),
                format_float(a.mean[k]),
                format_float(a.stderr[k]),
                a.n_effective.to_string(),
            ]);
            v
        })
        .collect()
}

#[derive(Debug, Deserialize)]
pub(crate) struct RunRow {
    pub algorithm: VariantKind,
    pub d: usize,
    pub lr: f64,
    pub alpha_init: Option<f64>,
    pub seed: usize,
    pub epoch: usize,
    pub test_mse: f64,
    pub diverged: u8,
}

#[derive(Debug, Deserialize)]
pub(crate) struct SummaryRow {
    pub algorithm: VariantKind,
    pub d: usize,
    pub lr: f64,
    pub alpha_init: Option<f64>,
    pub seed: usize,
    pub run_seed: u64,
    pub n_evals: usize,
    #[allow(dead_code)]
    pub final_test_mse: Option<f64>,
    pub restricted_mse: Option<f64>,
    pub diverged_at: Option<usize>,
    pub params_digest: String,
}

impl RunRow {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            algorithm: self.algorithm,
            d: self.d,
            lr: self.lr,
            alpha_init: self.alpha_init,
        }
    }
}

impl SummaryRow {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            algorithm: self.algorithm,
            d: self.d,
            lr: self.lr,
            alpha_init: self.alpha_init,
        }
    }
}

/// Reads every row of a headed CSV file; a missing file reads as empty.
pub(crate) fn read_rows<T: for<'de> Deserialize<'de>>(
    path: &Path,
    header: &[&str],
) -> Result<Vec<T>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    // An interrupted append can leave an unterminated last line. Rows are
    // flushed before their run is marked complete, so that line always
    // belongs to an unfinished run.
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes.truncate(complete);
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let found = rdr.headers().map_err(|e| HarnessError::csv(path, e))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(HarnessError::csv(
            path,
            format!("expected header {}", header.join(",")),
        ));
    }
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::csv(path, e))
}

/// Writes a whole file through a sibling temporary and a rename.
pub(crate) fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), HarnessError> {
    let tmp = tmp_path(path);
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&tmp)
            .map_err(|e| HarnessError::io(&tmp, e))?;
        w.write_record(header)
            .map_err(|e| HarnessError::io(&tmp, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| HarnessError::io(&tmp, e))?;
        }
        w.flush().map_err(|e| HarnessError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Append-only writer for a file that already carries its header.
pub(crate) struct Appender {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        let w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn append(&mut self, rows: &[Vec<String>]) -> Result<(), HarnessError> {
        for row in rows {
            self.w
                .write_record(row)
                .map_err(|e| HarnessError::io(&self.path, e))?;
        }
        self.w.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// One line of `function.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FunctionRow {
    pub x: f64,
    pub y_star: f64,
    pub y_pred: f64,
}

pub fn write_function_csv(path: &Path, rows: &[FunctionRow]) -> Result<(), HarnessError> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format_float(r.x),
                format_float(r.y_star),
                format_float(r.y_pred),
            ]
        })
        .collect();
    write_csv(path, &FUNCTION_HEADER, &rows)
}
