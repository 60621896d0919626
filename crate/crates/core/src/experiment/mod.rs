//! The λ sweep: one feedback-loop simulation per trial, then one model per
//! (λ, variant) trained on that trial's FL data and scored on FL and RUS.

mod report;

pub use report::{
    emit_report, load_sweep, panel_rows, read_runs_csv, run_log, write_runs_csv, LogisticSummary,
    NaiveSummary, PanelRow, ReportFormat, Summary, TableCtr, VariantGain, PANEL_METRICS, SUMMARY_FORMAT,
    SUMMARY_VERSION,
};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annmodel::{self, AnnParams, BPolicy, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::feedbacksim::{self, CtrTable, Dataset, FeedbackSimConfig, NaiveBaseline};
use crate::metrics;
use crate::seed;

const TAG_TRAIN: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sim: FeedbackSimConfig,
    /// Template; `lambda`, `variant` and `rng_seed` are set per run.
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    pub trials: usize,
    pub variants: Vec<Variant>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            sim: FeedbackSimConfig::default(),
            train: TrainConfig::default(),
            lambdas: default_lambdas(),
            trials: 10,
            variants: vec![Variant::WithBypass, Variant::NoBypass],
            output_dir: PathBuf::from("results"),
            master_seed: 2019,
        }
    }
}

/// `0` followed by `1 − 10⁻ᵏ` for k = 1..=5.
pub fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.9, 0.99, 0.999, 0.9999, 0.99999]
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let mut probe = self.train.clone();
        for &lambda in &self.lambdas {
            probe.lambda = lambda;
            probe.validate()?;
        }
        if self.lambdas.is_empty() {
            return Err(Error::config("lambdas must not be empty"));
        }
        if self.lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lambdas must be strictly increasing"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be positive"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("at least one variant is required"));
        }
        let mut v = self.variants.clone();
        v.sort();
        v.dedup();
        if v.len() != self.variants.len() {
            return Err(Error::config("variants must be distinct"));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        seed::derive(self.master_seed, trial as u64)
    }
}

/// Per-trial facts shared by every run of that trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub trial: usize,
    pub sim_seed: u64,
    pub train_seed: u64,
    pub b_table: CtrTable,
    /// Mean position-1 and position-2 CTR over every ranked day.
    pub all_days_ctr: [f64; 2],
    pub naive: NaiveBaseline,
    /// Logistic regression trained on the reservoir, scored on the heldout set.
    pub logistic_auc: f64,
    pub logistic_log_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: usize,
    pub lambda: f64,
    pub variant: Variant,
    pub fl_auc: f64,
    pub fl_log_loss: f64,
    pub fl_probe_mse: f64,
    pub rus_auc: f64,
    pub rus_log_loss: f64,
    pub rus_probe_mse: f64,
    pub bypass_diff: f64,
    pub final_loss_n: f64,
    pub final_loss_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub trial: usize,
    pub lambda: f64,
    pub variant: Variant,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Stat {
        let (mean, std) = metrics::mean_std(values);
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub lambda: f64,
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub fl_auc: Stat,
    pub fl_log_loss: Stat,
    pub fl_probe_mse: Stat,
    pub rus_auc: Stat,
    pub rus_log_loss: Stat,
    pub rus_probe_mse: Stat,
    pub bypass_diff: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: ExperimentSpec,
    pub trials: Vec<TrialInfo>,
    /// Ordered by trial, then variant as listed in the spec, then λ.
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// Ordered by variant as listed in the spec, then λ.
    pub cells: Vec<CellSummary>,
}

impl SweepResult {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn cell(&self, lambda: f64, variant: Variant) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.lambda == lambda && c.variant == variant)
    }

    pub fn cells_for(&self, variant: Variant) -> Vec<&CellSummary> {
        self.cells.iter().filter(|c| c.variant == variant).collect()
    }

    pub fn records_for(&self, trial: usize, variant: Variant) -> Vec<&RunRecord> {
        self.records
            .iter()
            .filter(|r| r.trial == trial && r.variant == variant)
            .collect()
    }

    /// Best mean RUS AUC over λ against the λ = 0 cell.
    pub fn best_rus_gain(&self, variant: Variant) -> Option<VariantGain> {
        let base = self.cell(0.0, variant).filter(|c| c.runs > 0)?;
        let best = self
            .cells_for(variant)
            .into_iter()
            .filter(|c| c.runs > 0)
            .max_by(|a, b| a.rus_auc.mean.total_cmp(&b.rus_auc.mean))?;
        Some(VariantGain {
            variant,
            best_lambda: best.lambda,
            best_rus_auc: best.rus_auc.mean,
            baseline_rus_auc: base.rus_auc.mean,
            relative_gain_pct: metrics::relative_auc_gain(best.rus_auc.mean, base.rus_auc.mean).ok()?,
            absolute_pp_diff: metrics::absolute_pp_diff(best.rus_auc.mean, base.rus_auc.mean),
        })
    }
}

/// Groups records into cells in spec order. Cell statistics depend only on
/// the records, so they can be rebuilt exactly from `runs.csv`.
pub fn aggregate(spec: &ExperimentSpec, records: &[RunRecord], failures: &[RunFailure]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &variant in &spec.variants {
        for &lambda in &spec.lambdas {
            let runs: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.variant == variant && r.lambda == lambda)
                .collect();
            let stat = |f: fn(&RunRecord) -> f64| Stat::of(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            cells.push(CellSummary {
                lambda,
                variant,
                runs: runs.len(),
                failed: failures
                    .iter()
                    .filter(|f| f.variant == variant && f.lambda == lambda)
                    .count(),
                fl_auc: stat(|r| r.fl_auc),
                fl_log_loss: stat(|r| r.fl_log_loss),
                fl_probe_mse: stat(|r| r.fl_probe_mse),
                rus_auc: stat(|r| r.rus_auc),
                rus_log_loss: stat(|r| r.rus_log_loss),
                rus_probe_mse: stat(|r| r.rus_probe_mse),
                bypass_diff: stat(|r| r.bypass_diff),
            });
        }
    }
    cells
}

struct TrialData {
    info: TrialInfo,
    fl: Dataset,
    heldout: Dataset,
}

fn simulate_trial(spec: &ExperimentSpec, trial: usize) -> Result<TrialData> {
    let sim_seed = spec.trial_seed(trial);
    let sim = FeedbackSimConfig {
        rng_seed: sim_seed,
        ..spec.sim.clone()
    };
    let out = feedbacksim::run_feedback_loop(&sim)?;
    let reference = feedbacksim::train_ranker(&out.reservoir, &sim.ranker)?;
    let p = reference.predict_proba(&out.heldout);
    let info = TrialInfo {
        trial,
        sim_seed,
        train_seed: seed::derive(sim_seed, TAG_TRAIN),
        b_table: out.b_table,
        all_days_ctr: out.all_days_ctr(),
        naive: feedbacksim::naive_ctr_baseline(&out),
        logistic_auc: metrics::auc(out.heldout.y(), &p)?,
        logistic_log_loss: metrics::log_loss(out.heldout.y(), &p)?,
    };
    Ok(TrialData {
        info,
        fl: out.fl_dataset(),
        heldout: out.heldout,
    })
}

/// Trains and scores one (trial, λ, variant) model.
fn run_one(
    spec: &ExperimentSpec,
    data: &TrialData,
    lambda: f64,
    variant: Variant,
    checkpoint_dir: Option<&Path>,
) -> Result<RunRecord> {
    let cfg = TrainConfig {
        lambda,
        variant,
        rng_seed: data.info.train_seed,
        ..spec.train.clone()
    };
    let fl = &data.fl;
    let heldout = &data.heldout;
    let fl_b = fl.require_b("FL evaluation")?;
    let [p1, p2] = data.info.b_table.last;

    let mut params = AnnParams::init(fl.n_features(), &cfg)?;
    let log = annmodel::train(&mut params, fl, &cfg)?;
    let last = log.epochs.last();

    let fl_pred = annmodel::infer(&params, fl.x(), BPolicy::Given(fl_b))?;
    let rus_pred = annmodel::infer(&params, heldout.x(), BPolicy::Position1Ctr(Some(p1)))?;
    let bypass = annmodel::bypass_prediction_diff(&params, heldout.x(), p1, p2)?;
    let fl_probe_mse = annmodel::probe_bias(&mut params, fl, &cfg)?;
    let rus_probe_mse = annmodel::bias_mse(&params, heldout.x(), &vec![p1; heldout.len()])?;

    if let Some(dir) = checkpoint_dir {
        params.save(dir.join(checkpoint_name(data.info.trial, lambda, variant)), &cfg)?;
    }

    Ok(RunRecord {
        trial: data.info.trial,
        lambda,
        variant,
        fl_auc: metrics::auc(fl.y(), &fl_pred)?,
        fl_log_loss: metrics::log_loss(fl.y(), &fl_pred)?,
        fl_probe_mse,
        rus_auc: metrics::auc(heldout.y(), &rus_pred)?,
        rus_log_loss: metrics::log_loss(heldout.y(), &rus_pred)?,
        rus_probe_mse,
        bypass_diff: bypass.mean_abs_diff,
        final_loss_n: last.map_or(f64::NAN, |e| e.mean_loss_n),
        final_loss_b: last.map_or(f64::NAN, |e| e.mean_loss_b),
    })
}

pub fn checkpoint_name(trial: usize, lambda: f64, variant: Variant) -> String {
    format!("trial{trial:02}_{}_lambda{lambda}.json", variant.as_str())
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<SweepResult> {
    run_sweep(spec, None)
}

/// As [`run_experiment`], also saving every trained model under
/// `checkpoint_dir`.
pub fn run_experiment_with_checkpoints(spec: &ExperimentSpec, checkpoint_dir: &Path) -> Result<SweepResult> {
    std::fs::create_dir_all(checkpoint_dir)?;
    run_sweep(spec, Some(checkpoint_dir))
}

/// The same sweep with position-2 clicks hidden with probability `r`.
pub fn run_user_bias_experiment(spec: &ExperimentSpec, r: f64) -> Result<SweepResult> {
    let mut spec = spec.clone();
    spec.sim.corruption = r;
    run_experiment(&spec)
}

fn run_sweep(spec: &ExperimentSpec, checkpoint_dir: Option<&Path>) -> Result<SweepResult> {
    spec.validate()?;
    let sims: Vec<Result<TrialData>> = (0..spec.trials)
        .into_par_iter()
        .map(|t| simulate_trial(spec, t))
        .collect();

    let mut work = Vec::new();
    for (t, sim) in sims.iter().enumerate() {
        for &variant in &spec.variants {
            for &lambda in &spec.lambdas {
                work.push((t, sim, variant, lambda));
            }
        }
    }
    let outcomes: Vec<Result<RunRecord, RunFailure>> = work
        .par_iter()
        .map(|&(trial, sim, variant, lambda)| {
            let fail = |e: &Error| RunFailure {
                trial,
                lambda,
                variant,
                error: e.to_string(),
            };
            match sim {
                Err(e) => Err(fail(e)),
                Ok(data) => run_one(spec, data, lambda, variant, checkpoint_dir).map_err(|e| fail(&e)),
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    let trials = sims.into_iter().filter_map(|s| s.ok().map(|d| d.info)).collect();
    let cells = aggregate(spec, &records, &failures);
    Ok(SweepResult {
        spec: spec.clone(),
        trials,
        records,
        failures,
        cells,
    })
}
