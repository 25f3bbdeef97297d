//! Command-line front end. Results go to stdout or files, diagnostics to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{baseline_tau, baseline_train, BaselineConfig, BaselineModel, LearnerKind, BASELINE_VERSION};
use crate::data::{generate_synthetic, load_csv, save_csv, Dataset, DgpConfig};
use crate::error::{MtdmlError, Result};
use crate::eval::{evaluate, evaluate_scores, treated_flags, write_curve_csv, EvalSettings, MetricsReport};
use crate::training::{crossfit_train, CrossFitEnsemble, RoundReport, TrainConfig, TrainMode, ENSEMBLE_VERSION};

pub const THREADS_ENV: &str = "MTDML_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub curve: Option<PathBuf>,
}

/// Everything a run can be configured with. Missing sections take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: DgpConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub baseline: BaselineConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MtdmlError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MtdmlError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.baseline.validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtdml", version, about = "Debiased multi-treatment effect estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Learner {
    Mtdml,
    S,
    T,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset with ground-truth columns.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the cross-fitted ensemble or a baseline learner.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Learner::Mtdml)]
        learner: Learner,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Use one embedding for all three factors.
        #[arg(long)]
        no_disentangle: bool,
        /// Squared error instead of the Tweedie loss.
        #[arg(long)]
        no_tweedie: bool,
    },
    /// Compute metrics; fields needing ground truth are null when it is absent.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Uplift curve CSV (fraction, qini).
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        contrast: Option<f64>,
    },
    /// Per-sample outcome change between two treatment vectors.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated, one value per treatment dimension.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        t_from: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        t_to: Vec<f64>,
    },
    /// Tabulate metrics files side by side.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Crossfit,
    Joint,
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.dgp.seed = seed;
        cfg.train.seed = seed;
        cfg.baseline.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.train.threads = v
            .trim()
            .parse()
            .map_err(|_| MtdmlError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    }
    if cfg.train.threads == 0 {
        return Err(MtdmlError::Config(format!("{THREADS_ENV} must be >= 1")));
    }
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| MtdmlError::Config(format!("missing path: pass --{flag} or set paths.{flag} in the config")))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| MtdmlError::io(path, e))
}

enum LoadedModel {
    Ensemble(CrossFitEnsemble),
    Baseline(BaselineModel),
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| MtdmlError::io(path, e))?;
    let head: Value = serde_json::from_str(&text)?;
    match head.get("version").and_then(Value::as_str) {
        Some(ENSEMBLE_VERSION) => Ok(LoadedModel::Ensemble(CrossFitEnsemble::from_json(&text)?)),
        Some(BASELINE_VERSION) => Ok(LoadedModel::Baseline(BaselineModel::from_json(&text)?)),
        other => Err(MtdmlError::Config(format!("{}: unrecognized model version {other:?}", path.display()))),
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MtdmlError::State(format!("thread pool: {e}")))?
        .install(f)
}

fn cmd_simulate(common: &Common, n: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(n) = n {
        cfg.dgp.n = n;
    }
    cfg.validate()?;
    let out = required(&cfg.paths.out, "out")?;
    let ds = with_pool(cfg.train.threads, || generate_synthetic(&cfg.dgp))?;
    save_csv(&ds, out)?;
    print_json(&ds.summary())
}

fn stage_summary(r: &RoundReport) -> Value {
    let stage = |s: &crate::training::StageReport| json!({ "epochs_run": s.epochs_run(), "losses": s.last });
    match &r.second {
        Some(second) => json!({ "propensity": stage(&r.first), "causal": stage(second) }),
        None => json!({ "joint": stage(&r.first) }),
    }
}

fn cmd_train(
    common: &Common,
    data: &Option<PathBuf>,
    learner: Learner,
    epochs: Option<usize>,
    mode: Option<ModeArg>,
    no_disentangle: bool,
    no_tweedie: bool,
) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if data.is_some() {
        cfg.paths.data = data.clone();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.baseline.epochs = e;
    }
    if let Some(m) = mode {
        cfg.train.mode = match m {
            ModeArg::Crossfit => TrainMode::Crossfit,
            ModeArg::Joint => TrainMode::Joint,
        };
    }
    if no_disentangle {
        cfg.train.use_ica_disentangle = false;
    }
    if no_tweedie {
        cfg.train.use_tweedie = false;
    }
    cfg.validate()?;
    let out = required(&cfg.paths.out, "out")?.to_path_buf();
    let ds = load_csv(required(&cfg.paths.data, "data")?)?;
    match learner {
        Learner::Mtdml => {
            eprintln!("training cross-fitted ensemble on {} rows", ds.len());
            let ens = crossfit_train(&ds, &cfg.train)?;
            ens.save(&out)?;
            print_json(&json!({
                "learner": "mtdml",
                "model": out,
                "model_a": stage_summary(&ens.diagnostics.model_a),
                "model_b": stage_summary(&ens.diagnostics.model_b),
            }))
        }
        Learner::S | Learner::T => {
            let kind = if learner == Learner::S { LearnerKind::S } else { LearnerKind::T };
            let derivation = cfg.eval.resolve(&ds)?;
            let treated = treated_flags(&ds, &derivation);
            eprintln!("training {kind:?}-learner on {} rows", ds.len());
            let model = baseline_train(kind, &ds.x, &treated, &ds.y, &cfg.baseline)?;
            model.save(&out)?;
            print_json(&json!({ "learner": format!("{kind:?}").to_lowercase(), "model": out }))
        }
    }
}

fn check_input_dim(expected: usize, ds: &Dataset) -> Result<()> {
    if ds.dim() != expected {
        return Err(MtdmlError::dim("covariate count of data vs model", expected, ds.dim()));
    }
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    model: &Option<PathBuf>,
    data: &Option<PathBuf>,
    curve: &Option<PathBuf>,
    overrides: (Option<usize>, Option<f64>, Option<f64>),
) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if model.is_some() {
        cfg.paths.model = model.clone();
    }
    if data.is_some() {
        cfg.paths.data = data.clone();
    }
    if curve.is_some() {
        cfg.paths.curve = curve.clone();
    }
    let (dim, threshold, contrast) = overrides;
    if let Some(d) = dim {
        cfg.eval.dim = d;
    }
    if threshold.is_some() {
        cfg.eval.threshold = threshold;
    }
    if let Some(c) = contrast {
        cfg.eval.contrast = c;
    }
    cfg.validate()?;
    let ds = load_csv(required(&cfg.paths.data, "data")?)?;
    let evaluation = match load_model(required(&cfg.paths.model, "model")?)? {
        LoadedModel::Ensemble(ens) => {
            check_input_dim(ens.input_dim(), &ds)?;
            evaluate(&ens, &ds, &cfg.eval)?
        }
        LoadedModel::Baseline(b) => {
            check_input_dim(b.input_dim(), &ds)?;
            let derivation = cfg.eval.resolve(&ds)?;
            let treated = treated_flags(&ds, &derivation);
            let y_hat = b.predict_observed(&ds.x, &treated)?;
            evaluate_scores(&ds, &derivation, baseline_tau(&b, &ds.x)?, Some(&y_hat), cfg.eval.policy_fraction)?
        }
    };
    if ds.truth.is_none() {
        eprintln!("no ground-truth columns: pehe, eps_ate, eps_att and policy_risk are null");
    }
    if let Some(path) = &cfg.paths.curve {
        if evaluation.curve.is_empty() {
            eprintln!("one treatment arm is empty: no uplift curve written");
        } else {
            write_curve_csv(&evaluation.curve, path)?;
        }
    }
    let text = serde_json::to_string(&evaluation.report)?;
    if let Some(out) = &cfg.paths.out {
        write_text(out, &format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_predict(
    common: &Common,
    model: &Option<PathBuf>,
    data: &Option<PathBuf>,
    t_from: &[f64],
    t_to: &[f64],
) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if model.is_some() {
        cfg.paths.model = model.clone();
    }
    if data.is_some() {
        cfg.paths.data = data.clone();
    }
    let out = required(&cfg.paths.out, "out")?;
    let ens = match load_model(required(&cfg.paths.model, "model")?)? {
        LoadedModel::Ensemble(e) => e,
        LoadedModel::Baseline(_) => {
            return Err(MtdmlError::Capability("predict needs an ensemble model; baselines have no sensitivities".into()))
        }
    };
    let k_t = ens.treatment_dim();
    if t_from.len() != k_t || t_to.len() != k_t {
        return Err(MtdmlError::Config(format!(
            "--t-from and --t-to need {k_t} values each, got {} and {}",
            t_from.len(),
            t_to.len()
        )));
    }
    let ds = load_csv(required(&cfg.paths.data, "data")?)?;
    check_input_dim(ens.input_dim(), &ds)?;
    let delta = ens.uplift(&ds.x, t_from, t_to)?;
    let kappa = ens.sensitivity(&ds.x)?;
    let io = |e| MtdmlError::io(out, e);
    let mut w = BufWriter::new(File::create(out).map_err(io)?);
    let mut header = vec!["row".to_string(), "delta_y".to_string()];
    header.extend((0..k_t).map(|k| format!("kappa_{k}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, d) in delta.iter().enumerate() {
        let kap: Vec<String> = kappa.row(i).iter().map(f64::to_string).collect();
        writeln!(w, "{i},{d},{}", kap.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let mean = delta.iter().sum::<f64>() / delta.len().max(1) as f64;
    print_json(&json!({ "rows": delta.len(), "mean_delta_y": mean, "out": out }))
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "model",
    "pehe",
    "eps_ate",
    "eps_att",
    "policy_risk",
    "qini_auuc",
    "pcoc",
    "n_evaluated",
];

pub const NULL_CELL: &str = "NA";

/// `v` rounded to six significant digits.
pub fn six_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    if (-4..15).contains(&magnitude) {
        let decimals = (5 - magnitude).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

fn report_row(label: &str, m: &MetricsReport) -> Vec<String> {
    let cell = |v: Option<f64>| v.map(six_significant).unwrap_or_else(|| NULL_CELL.to_string());
    vec![
        label.to_string(),
        cell(m.pehe),
        cell(m.eps_ate),
        cell(m.eps_att),
        cell(m.policy_risk),
        cell(m.qini_auuc),
        cell(m.pcoc),
        m.n_evaluated.to_string(),
    ]
}

fn cmd_report(common: &Common, inputs: &[PathBuf]) -> Result<()> {
    let cfg = resolve_config(common)?;
    let mut rows = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| MtdmlError::io(path, e))?;
        let m: MetricsReport = serde_json::from_str(&text)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(report_row(&label, &m));
    }
    if let Some(out) = &cfg.paths.out {
        let mut csv = csv::Writer::from_path(out).map_err(|e| MtdmlError::io(out, e.into()))?;
        let io = |e: csv::Error| MtdmlError::io(out, e.into());
        csv.write_record(REPORT_COLUMNS).map_err(io)?;
        for r in &rows {
            csv.write_record(r).map_err(io)?;
        }
        csv.flush().map_err(|e| MtdmlError::io(out, e))?;
    }
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([REPORT_COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", line(REPORT_COLUMNS.to_vec()));
    for r in &rows {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { common, n } => cmd_simulate(common, *n),
        Command::Train {
            common,
            data,
            learner,
            epochs,
            mode,
            no_disentangle,
            no_tweedie,
        } => cmd_train(common, data, *learner, *epochs, *mode, *no_disentangle, *no_tweedie),
        Command::Evaluate {
            common,
            model,
            data,
            curve,
            dim,
            threshold,
            contrast,
        } => cmd_evaluate(common, model, data, curve, (*dim, *threshold, *contrast)),
        Command::Predict {
            common,
            model,
            data,
            t_from,
            t_to,
        } => cmd_predict(common, model, data, t_from, t_to),
        Command::Report { common, metrics } => cmd_report(common, metrics),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(six_significant(1.0), "1.00000");
        assert_eq!(six_significant(0.0123456789), "0.0123457");
        assert_eq!(six_significant(123456.789), "123457");
        assert_eq!(six_significant(1.5e-7), "1.50000e-7");
        assert_eq!(six_significant(0.0), "0");
    }

    #[test]
    fn config_sections_default() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.dgp, DgpConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
