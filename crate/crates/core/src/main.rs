use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ann_debias::annmodel::{self, AnnParams, BPolicy, Variant};
use ann_debias::experiment::{self, ExperimentSpec, ReportFormat, SweepResult};
use ann_debias::{metrics, run_feedback_loop, Dataset, Error, Result};

#[derive(Parser)]
#[command(name = "ann-debias", version, about = "Feedback-loop debiasing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one feedback-loop simulation and export its FL and heldout sets.
    Simulate(SimulateArgs),
    /// Train one model on an exported FL set.
    Train(TrainArgs),
    /// Run the full λ sweep.
    Sweep(SweepArgs),
    /// Run the λ sweep with position-2 clicks hidden with probability r.
    UserBias(UserBiasArgs),
    /// Regenerate report files from a saved sweep.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corruption: Option<f64>,
    #[arg(long)]
    days: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// FL training set (CSV with a filled `b` column).
    #[arg(long)]
    data: PathBuf,
    /// Optional unbiased evaluation set, scored with b fixed to --position1-ctr.
    #[arg(long, requires = "position1_ctr")]
    heldout: Option<PathBuf>,
    #[arg(long)]
    position1_ctr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated λ grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Skip saving per-run model checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct UserBiasArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, default_value_t = 0.25)]
    r: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// A sweep.json written by `sweep` or `user-bias`.
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(out) = &common.out {
        spec.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        spec.master_seed = seed;
    }
    Ok(spec)
}

fn write_resolved<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let mut spec = load_spec(&args.common)?;
    if let Some(r) = args.corruption {
        spec.sim.corruption = r;
    }
    if let Some(t) = args.days {
        spec.sim.days = t;
    }
    spec.sim.rng_seed = spec.master_seed;
    spec.sim.validate()?;
    let dir = spec.output_dir.clone();
    write_resolved(&dir, &spec)?;
    let out = run_feedback_loop(&spec.sim)?;
    out.fl_dataset().export(dir.join("fl.csv"))?;
    out.heldout.export(dir.join("heldout.csv"))?;
    write_json(&dir.join("simulation.json"), &out.summary())?;
    let t = out.b_table;
    eprintln!(
        "last day CTR: position 1 {:.3}, position 2 {:.3}; previous day {:.3}, {:.3}",
        t.last[0], t.last[1], t.prev[0], t.prev[1]
    );
    eprintln!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TrainMetrics {
    lambda: f64,
    variant: Variant,
    fl_auc: f64,
    fl_log_loss: f64,
    fl_probe_mse: f64,
    heldout: Option<metrics::MetricsReport>,
    log: annmodel::TrainingLog,
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let spec = load_spec(&args.common)?;
    let mut cfg = spec.train.clone();
    cfg.rng_seed = spec.master_seed;
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    let dir = spec.output_dir.clone();
    write_resolved(&dir, &cfg)?;

    let fl = Dataset::import(&args.data)?;
    let mut params = AnnParams::init(fl.n_features(), &cfg)?;
    let log = annmodel::train(&mut params, &fl, &cfg)?;
    let pred = annmodel::infer(&params, fl.x(), BPolicy::Given(fl.require_b("train")?))?;
    let heldout = match &args.heldout {
        Some(path) => {
            let data = Dataset::import(path)?;
            let p = annmodel::infer(&params, data.x(), BPolicy::Position1Ctr(args.position1_ctr))?;
            Some((data, p))
        }
        None => None,
    };
    let fl_probe_mse = annmodel::probe_bias(&mut params, &fl, &cfg)?;
    let heldout = match heldout {
        Some((data, p)) => {
            let b = vec![args.position1_ctr.unwrap_or_default(); data.len()];
            let probe = annmodel::bias_mse(&params, data.x(), &b)?;
            Some(metrics::MetricsReport::new(metrics::ScenarioTag::Rus, data.y(), &p, probe)?)
        }
        None => None,
    };
    let report = TrainMetrics {
        lambda: cfg.lambda,
        variant: cfg.variant,
        fl_auc: metrics::auc(fl.y(), &pred)?,
        fl_log_loss: metrics::log_loss(fl.y(), &pred)?,
        fl_probe_mse,
        heldout,
        log,
    };
    params.save(dir.join("model.json"), &cfg)?;
    write_json(&dir.join("metrics.json"), &report)?;
    eprintln!(
        "FL AUC {:.4}, probe MSE {:.6}{}",
        report.fl_auc,
        report.fl_probe_mse,
        report
            .heldout
            .as_ref()
            .map(|h| format!(", heldout AUC {:.4}", h.auc))
            .unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}

fn finish_sweep(spec: &ExperimentSpec, result: &SweepResult) -> Result<ExitCode> {
    let dir = &spec.output_dir;
    let files = experiment::emit_report(result, dir, &[ReportFormat::Csv, ReportFormat::Json])?;
    write_json(&dir.join("failures.json"), &result.failures)?;
    eprint!("{}", experiment::run_log(result));
    eprintln!("wrote {} report files to {}", files.len(), dir.display());
    if result.is_complete() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "{} runs failed; see {}",
            result.failures.len(),
            dir.join("failures.json").display()
        );
        Ok(ExitCode::from(2))
    }
}

fn sweep_spec(args: &SweepArgs) -> Result<ExperimentSpec> {
    let mut spec = load_spec(&args.common)?;
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(l) = &args.lambdas {
        spec.lambdas = l.clone();
    }
    Ok(spec)
}

fn run_sweep(spec: ExperimentSpec, no_checkpoints: bool) -> Result<ExitCode> {
    spec.validate()?;
    write_resolved(&spec.output_dir, &spec)?;
    let result = if no_checkpoints {
        experiment::run_experiment(&spec)?
    } else {
        experiment::run_experiment_with_checkpoints(&spec, &spec.output_dir.join("checkpoints"))?
    };
    finish_sweep(&spec, &result)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let mut result = experiment::load_sweep(&args.sweep)?;
    result.cells = experiment::aggregate(&result.spec, &result.records, &result.failures);
    result.spec.output_dir = args.out;
    let spec = result.spec.clone();
    finish_sweep(&spec, &result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep_spec(&a).and_then(|s| run_sweep(s, a.no_checkpoints)),
        Command::UserBias(a) => sweep_spec(&a.sweep).and_then(|mut s| {
            s.sim.corruption = a.r;
            run_sweep(s, a.sweep.no_checkpoints)
        }),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
