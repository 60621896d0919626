//! Report files for a finished sweep.
//!
//! | file | content |
//! |------|---------|
//! | `panel_<metric>.csv` | one row per λ (increasing): axis value `-log10(1-λ)`, then mean/std/runs per variant |
//! | `runs.csv`, `runs.json` | every per-run record |
//! | `summary.json` | CTR, naive-baseline and logistic tables plus cell statistics and AUC gains |
//! | `sweep.json` | the complete [`SweepResult`], enough to regenerate every other file |
//! | `run.log` | plain-text digest |

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CellSummary, RunFailure, RunRecord, Stat, SweepResult};
use crate::annmodel::Variant;
use crate::error::Result;
use crate::feedbacksim::format_f64;

pub const SUMMARY_FORMAT: &str = "ann-debias-summary";
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Position CTRs averaged over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableCtr {
    pub last_day_position1: Stat,
    pub last_day_position2: Stat,
    pub all_days_position1: Stat,
    pub all_days_position2: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaiveSummary {
    pub avg_ctr: Stat,
    pub mse: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticSummary {
    pub auc: Stat,
    pub log_loss: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantGain {
    pub variant: Variant,
    pub best_lambda: f64,
    pub best_rus_auc: f64,
    pub baseline_rus_auc: f64,
    /// `100·(best − baseline)/baseline`.
    pub relative_gain_pct: f64,
    /// `100·(best − baseline)`, in percentage points.
    pub absolute_pp_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub corruption: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub lambdas: Vec<f64>,
    pub complete: bool,
    pub ctr: TableCtr,
    pub naive_baseline: NaiveSummary,
    pub logistic_reference: LogisticSummary,
    pub cells: Vec<CellSummary>,
    pub gains: Vec<VariantGain>,
    pub failures: Vec<RunFailure>,
}

impl Summary {
    pub fn from_result(result: &SweepResult) -> Summary {
        let t = &result.trials;
        let stat = |f: &dyn Fn(&super::TrialInfo) -> f64| Stat::of(&t.iter().map(f).collect::<Vec<_>>());
        Summary {
            format: SUMMARY_FORMAT.into(),
            version: SUMMARY_VERSION,
            corruption: result.spec.sim.corruption,
            trials: result.spec.trials,
            master_seed: result.spec.master_seed,
            lambdas: result.spec.lambdas.clone(),
            complete: result.is_complete(),
            ctr: TableCtr {
                last_day_position1: stat(&|i| i.b_table.last[0]),
                last_day_position2: stat(&|i| i.b_table.last[1]),
                all_days_position1: stat(&|i| i.all_days_ctr[0]),
                all_days_position2: stat(&|i| i.all_days_ctr[1]),
            },
            naive_baseline: NaiveSummary {
                avg_ctr: stat(&|i| i.naive.avg_ctr),
                mse: stat(&|i| i.naive.mse),
            },
            logistic_reference: LogisticSummary {
                auc: stat(&|i| i.logistic_auc),
                log_loss: stat(&|i| i.logistic_log_loss),
            },
            cells: result.cells.clone(),
            gains: result
                .spec
                .variants
                .iter()
                .filter_map(|&v| result.best_rus_gain(v))
                .collect(),
            failures: result.failures.clone(),
        }
    }

    /// Parses and checks a `summary.json` document.
    pub fn from_json(text: &str) -> Result<Summary> {
        let s: Summary = serde_json::from_str(text)?;
        if s.format != SUMMARY_FORMAT || s.version != SUMMARY_VERSION {
            return Err(crate::Error::input(format!(
                "unexpected summary format {:?} v{}",
                s.format, s.version
            )));
        }
        Ok(s)
    }
}

/// One row of a panel file.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub lambda: f64,
    /// `-log10(1 − λ)`: 0 at λ = 0, k at λ = 1 − 10⁻ᵏ.
    pub axis: f64,
    pub stats: Vec<(Variant, Stat, usize)>,
}

pub const PANEL_METRICS: [&str; 5] = ["fl_auc", "fl_probe_mse", "rus_auc", "rus_probe_mse", "bypass_diff"];

fn panel_metric(cell: &CellSummary, metric: &str) -> Stat {
    match metric {
        "fl_auc" => cell.fl_auc,
        "fl_probe_mse" => cell.fl_probe_mse,
        "rus_auc" => cell.rus_auc,
        "rus_probe_mse" => cell.rus_probe_mse,
        "bypass_diff" => cell.bypass_diff,
        _ => unreachable!("unknown panel metric {metric}"),
    }
}

pub fn panel_rows(result: &SweepResult, metric: &str) -> Vec<PanelRow> {
    let mut lambdas = result.spec.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas
        .into_iter()
        .map(|lambda| PanelRow {
            lambda,
            axis: -(1.0 - lambda).log10() + 0.0,
            stats: result
                .spec
                .variants
                .iter()
                .filter_map(|&v| result.cell(lambda, v).map(|c| (v, panel_metric(c, metric), c.runs)))
                .collect(),
        })
        .collect()
}

fn csv_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer)
}

fn write_panel(path: &Path, result: &SweepResult, metric: &str) -> Result<()> {
    let mut w = csv_writer(File::create(path)?);
    let mut header = vec!["lambda".to_string(), "axis".to_string()];
    for v in &result.spec.variants {
        for suffix in ["mean", "std", "runs"] {
            header.push(format!("{}_{suffix}", v.as_str()));
        }
    }
    w.write_record(&header)?;
    for row in panel_rows(result, metric) {
        let mut rec = vec![format_f64(row.lambda), format_f64(row.axis)];
        for (_, s, n) in &row.stats {
            rec.extend([format_f64(s.mean), format_f64(s.std), n.to_string()]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runs_csv<W: Write>(records: &[RunRecord], writer: W) -> Result<()> {
    let mut w = csv_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(reader: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize().enumerate() {
        out.push(rec.map_err(|e: csv::Error| crate::Error::Parse {
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_sweep(path: impl AsRef<Path>) -> Result<SweepResult> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn run_log(result: &SweepResult) -> String {
    let mut s = String::new();
    let spec = &result.spec;
    let _ = writeln!(
        s,
        "sweep: {} trials, {} lambdas, {} variants, r = {}, master seed {}",
        spec.trials,
        spec.lambdas.len(),
        spec.variants.len(),
        spec.sim.corruption,
        spec.master_seed
    );
    for t in &result.trials {
        let _ = writeln!(
            s,
            "trial {:2}: last-day CTR p1 {:.4} p2 {:.4}, naive MSE {:.6}, logistic AUC {:.4}",
            t.trial, t.b_table.last[0], t.b_table.last[1], t.naive.mse, t.logistic_auc
        );
    }
    for c in &result.cells {
        let _ = writeln!(
            s,
            "{:<11} lambda {:<8} runs {:2} FL AUC {:.4}±{:.4} FL probe {:.6} RUS AUC {:.4}±{:.4} bypass {:.5}",
            c.variant.as_str(),
            c.lambda,
            c.runs,
            c.fl_auc.mean,
            c.fl_auc.std,
            c.fl_probe_mse.mean,
            c.rus_auc.mean,
            c.rus_auc.std,
            c.bypass_diff.mean
        );
    }
    for v in &spec.variants {
        if let Some(g) = result.best_rus_gain(*v) {
            let _ = writeln!(
                s,
                "{}: best lambda {} RUS AUC {:.4} vs {:.4} at lambda 0 ({:+.2}% relative, {:+.2} pp)",
                v.as_str(),
                g.best_lambda,
                g.best_rus_auc,
                g.baseline_rus_auc,
                g.relative_gain_pct,
                g.absolute_pp_diff
            );
        }
    }
    for f in &result.failures {
        let _ = writeln!(
            s,
            "FAILED trial {} {} lambda {}: {}",
            f.trial,
            f.variant.as_str(),
            f.lambda,
            f.error
        );
    }
    s
}

/// Writes the report files into `dir` and returns their paths.
pub fn emit_report(result: &SweepResult, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        for metric in PANEL_METRICS {
            let p = dir.join(format!("panel_{metric}.csv"));
            write_panel(&p, result, metric)?;
            written.push(p);
        }
        let p = dir.join("runs.csv");
        write_runs_csv(&result.records, BufWriter::new(File::create(&p)?))?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::Json) {
        for (name, value) in [
            ("summary.json", serde_json::to_value(Summary::from_result(result))?),
            ("runs.json", serde_json::to_value(&result.records)?),
            ("sweep.json", serde_json::to_value(result)?),
        ] {
            let p = dir.join(name);
            write_json(&p, &value)?;
            written.push(p);
        }
    }
    let p = dir.join("run.log");
    fs::write(&p, run_log(result))?;
    written.push(p);
    Ok(written)
}
