//! Effect-estimation metrics and the Qini uplift curve.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{true_contrast, Dataset};
use crate::error::{MtdmlError, Result};
use crate::training::CrossFitEnsemble;

fn same_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MtdmlError::dim(context, a, b));
    }
    if a == 0 {
        return Err(MtdmlError::Degenerate(format!("{context}: empty input")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pehe(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    same_len("pehe", tau_hat.len(), tau_true.len())?;
    let mse = tau_hat.iter().zip(tau_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau_hat.len() as f64;
    Ok(mse.sqrt())
}

pub fn eps_ate(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    same_len("eps_ate", tau_hat.len(), tau_true.len())?;
    Ok((mean(tau_hat) - mean(tau_true)).abs())
}

pub fn eps_att(tau_hat: &[f64], tau_true: &[f64], treated: &[bool]) -> Result<f64> {
    same_len("eps_att", tau_hat.len(), tau_true.len())?;
    same_len("eps_att treated flags", tau_hat.len(), treated.len())?;
    let (mut sum_hat, mut sum_true, mut n) = (0.0, 0.0, 0usize);
    for ((&a, &b), _) in tau_hat.iter().zip(tau_true).zip(treated).filter(|(_, &f)| f) {
        sum_hat += a;
        sum_true += b;
        n += 1;
    }
    if n == 0 {
        return Err(MtdmlError::Degenerate("eps_att: no treated samples".into()));
    }
    Ok(((sum_hat - sum_true) / n as f64).abs())
}

/// Regret of `policy` against the arm means, scaled by the largest arm mean.
pub fn policy_risk(policy: &[bool], mu1: &[f64], mu0: &[f64]) -> Result<f64> {
    same_len("policy_risk", policy.len(), mu1.len())?;
    same_len("policy_risk", policy.len(), mu0.len())?;
    let y_scale = mu1.iter().chain(mu0).copied().fold(f64::NEG_INFINITY, f64::max);
    if !(y_scale > 0.0) {
        return Err(MtdmlError::Degenerate(format!("policy_risk: arm-mean scale {y_scale} is not positive")));
    }
    let value: f64 = policy
        .iter()
        .zip(mu1.iter().zip(mu0))
        .map(|(&p, (&m1, &m0))| if p { m1 } else { m0 })
        .sum::<f64>()
        / policy.len() as f64;
    Ok(1.0 - value / y_scale)
}

pub fn pcoc(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    same_len("pcoc", y_hat.len(), y.len())?;
    let observed = mean(y);
    if !(observed > 0.0) {
        return Err(MtdmlError::Degenerate(format!("pcoc: observed mean {observed} is not positive")));
    }
    Ok(mean(y_hat) / observed)
}

/// How a continuous treatment was turned into a treated flag and an uplift score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub dim: usize,
    /// Samples with `t[dim] > threshold` are treated.
    pub threshold: f64,
    pub contrast: f64,
    pub baseline: Vec<f64>,
}

impl Derivation {
    pub fn t_from(&self) -> Vec<f64> {
        self.baseline.clone()
    }

    pub fn t_to(&self) -> Vec<f64> {
        let mut t = self.baseline.clone();
        t[self.dim] += self.contrast;
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryEvalView {
    pub score: Vec<f64>,
    pub treated: Vec<bool>,
    pub y: Vec<f64>,
    pub derivation: Derivation,
}

impl BinaryEvalView {
    pub fn new(score: Vec<f64>, treated: Vec<bool>, y: Vec<f64>, derivation: Derivation) -> Result<Self> {
        same_len("view score vs treated", score.len(), treated.len())?;
        same_len("view score vs y", score.len(), y.len())?;
        if let Some(i) = score.iter().position(|s| !s.is_finite()) {
            return Err(MtdmlError::numeric(format!("uplift score at row {i}")));
        }
        Ok(BinaryEvalView {
            score,
            treated,
            y,
            derivation,
        })
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    pub fn arm_sizes(&self) -> (usize, usize) {
        let n_t = self.treated.iter().filter(|&&f| f).count();
        (n_t, self.len() - n_t)
    }

    fn require_both_arms(&self) -> Result<()> {
        match self.arm_sizes() {
            (0, _) => Err(MtdmlError::Capability("Qini needs treated samples; the view has none".into())),
            (_, 0) => Err(MtdmlError::Capability("Qini needs control samples; the view has none".into())),
            _ => Ok(()),
        }
    }
}

/// Descending by score; equal scores keep ascending index order.
pub fn rank_order(score: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Q(0..=N) along the ranking.
fn qini_values(view: &BinaryEvalView) -> Result<Vec<f64>> {
    view.require_both_arms()?;
    let mut q = Vec::with_capacity(view.len() + 1);
    q.push(0.0);
    let (mut y_t, mut y_c, mut n_t, mut n_c) = (0.0, 0.0, 0usize, 0usize);
    for i in rank_order(&view.score) {
        if view.treated[i] {
            y_t += view.y[i];
            n_t += 1;
        } else {
            y_c += view.y[i];
            n_c += 1;
        }
        q.push(if n_c == 0 { y_t } else { y_t - y_c * n_t as f64 / n_c as f64 });
    }
    Ok(q)
}

/// Unnormalized Qini coefficient: area between the Q curve and the straight
/// line to `(N, Q(N))`, divided by `N`.
pub fn qini_auuc(view: &BinaryEvalView) -> Result<f64> {
    let q = qini_values(view)?;
    let n = view.len() as f64;
    let area: f64 = q.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok((area - 0.5 * n * q[view.len()]) / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub qini: f64,
}

/// The `N + 1` points behind [`qini_auuc`], starting at `(0, 0)`.
pub fn uplift_curve(view: &BinaryEvalView) -> Result<Vec<CurvePoint>> {
    let q = qini_values(view)?;
    let n = view.len() as f64;
    Ok(q.into_iter()
        .enumerate()
        .map(|(p, qini)| CurvePoint {
            fraction: p as f64 / n,
            qini,
        })
        .collect())
}

pub fn write_curve_csv(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| MtdmlError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "fraction,qini").map_err(io)?;
    for p in points {
        writeln!(w, "{},{}", p.fraction, p.qini).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Evaluation knobs. Unset threshold means the median of `t[dim]`; unset
/// baseline means the per-dimension mean of `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub dim: usize,
    pub threshold: Option<f64>,
    pub contrast: f64,
    pub baseline: Option<Vec<f64>>,
    /// Share of samples the budget policy treats, highest scores first.
    pub policy_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            dim: 0,
            threshold: None,
            contrast: 1.0,
            baseline: None,
            policy_fraction: 0.5,
        }
    }
}

pub fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(MtdmlError::Degenerate("median of an empty column".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !self.contrast.is_finite() {
            return Err(MtdmlError::Config(format!("contrast must be finite, got {}", self.contrast)));
        }
        if !(0.0..=1.0).contains(&self.policy_fraction) {
            return Err(MtdmlError::Config(format!(
                "policy_fraction must lie in [0, 1], got {}",
                self.policy_fraction
            )));
        }
        if matches!(self.threshold, Some(t) if !t.is_finite()) {
            return Err(MtdmlError::Config("threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, ds: &Dataset) -> Result<Derivation> {
        self.validate()?;
        let k_t = ds.treatment_dim();
        if self.dim >= k_t {
            return Err(MtdmlError::Config(format!("eval dim {} out of range for {k_t} treatments", self.dim)));
        }
        let threshold = match self.threshold {
            Some(t) => t,
            None => median(&ds.t.column(self.dim))?,
        };
        let baseline = match &self.baseline {
            Some(b) if b.len() != k_t => return Err(MtdmlError::dim("eval baseline", k_t, b.len())),
            Some(b) => b.clone(),
            None => (0..k_t).map(|k| mean(&ds.t.column(k))).collect(),
        };
        Ok(Derivation {
            dim: self.dim,
            threshold,
            contrast: self.contrast,
            baseline,
        })
    }
}

/// Treated flags from `t[dim] > threshold`. Single-arm splits are allowed here;
/// metrics that need both arms reject them.
pub fn treated_flags(ds: &Dataset, derivation: &Derivation) -> Vec<bool> {
    ds.t.column(derivation.dim).iter().map(|&v| v > derivation.threshold).collect()
}

pub fn binarize(ds: &Dataset, derivation: &Derivation, ensemble: &CrossFitEnsemble) -> Result<BinaryEvalView> {
    let score = ensemble.uplift(&ds.x, &derivation.t_from(), &derivation.t_to())?;
    BinaryEvalView::new(score, treated_flags(ds, derivation), ds.y.clone(), derivation.clone())
}

/// Treats the top `fraction` of samples by score.
pub fn budget_policy(score: &[f64], fraction: f64) -> Vec<bool> {
    let n_treat = (fraction * score.len() as f64).round() as usize;
    let mut policy = vec![false; score.len()];
    for &i in rank_order(score).iter().take(n_treat) {
        policy[i] = true;
    }
    policy
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pehe: Option<f64>,
    pub eps_ate: Option<f64>,
    pub eps_att: Option<f64>,
    pub policy_risk: Option<f64>,
    pub qini_auuc: Option<f64>,
    pub pcoc: Option<f64>,
    pub n_evaluated: usize,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub view: BinaryEvalView,
    /// Empty when the split leaves one arm empty.
    pub curve: Vec<CurvePoint>,
}

fn single_arm_to_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MtdmlError::Capability(_)) | Err(MtdmlError::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics for `scores` on `ds`. Fields needing ground truth are `None` when
/// the dataset carries none.
pub fn evaluate_scores(
    ds: &Dataset,
    derivation: &Derivation,
    score: Vec<f64>,
    y_hat: Option<&[f64]>,
    policy_fraction: f64,
) -> Result<Evaluation> {
    let view = BinaryEvalView::new(score, treated_flags(ds, derivation), ds.y.clone(), derivation.clone())?;
    let mut report = MetricsReport {
        n_evaluated: view.len(),
        ..Default::default()
    };
    let (t_from, t_to) = (derivation.t_from(), derivation.t_to());
    if let Some(truth) = ds.truth.as_ref() {
        let (tau, _) = true_contrast(Some(truth), &t_from, &t_to)?;
        report.pehe = Some(pehe(&view.score, &tau)?);
        report.eps_ate = Some(eps_ate(&view.score, &tau)?);
        report.eps_att = single_arm_to_none(eps_att(&view.score, &tau, &view.treated))?;
        let mu1: Vec<f64> = (0..ds.len()).map(|i| truth.mean_outcome(i, &t_to)).collect();
        let mu0: Vec<f64> = (0..ds.len()).map(|i| truth.mean_outcome(i, &t_from)).collect();
        report.policy_risk = Some(policy_risk(&budget_policy(&view.score, policy_fraction), &mu1, &mu0)?);
    }
    report.qini_auuc = single_arm_to_none(qini_auuc(&view))?;
    if let Some(y_hat) = y_hat {
        report.pcoc = single_arm_to_none(pcoc(y_hat, &ds.y))?;
    }
    let curve = single_arm_to_none(uplift_curve(&view))?.unwrap_or_default();
    Ok(Evaluation { report, view, curve })
}

pub fn evaluate(ensemble: &CrossFitEnsemble, ds: &Dataset, settings: &EvalSettings) -> Result<Evaluation> {
    let derivation = settings.resolve(ds)?;
    let score = ensemble.uplift(&ds.x, &derivation.t_from(), &derivation.t_to())?;
    let y_hat = ensemble.predict(&ds.x, &ds.t)?.y_final;
    evaluate_scores(ds, &derivation, score, Some(&y_hat), settings.policy_fraction)
}
