//! Synthetic confounded data with known effects, and CSV ingestion/export.
//!
//! Covariates are split by index into three blocks: instrumental (drives treatment
//! only), confounding (drives both) and adjustment (drives outcome only). Outcomes
//! are exact Tweedie draws via the compound Poisson–Gamma representation, so the
//! data are zero-inflated and long-tailed with closed-form `E[y] = mu` and
//! `P(y = 0) = exp(-lambda)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MtdmlError, Result};
use crate::nn::{softplus, Tensor2};

/// Lower clamp on the outcome mean.
pub const MU_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EffectKind {
    /// Same sensitivity `c` for every sample and dimension.
    Constant { c: f64 },
    /// `softplus(v_k · x_{C∪A} / sqrt(d_C + d_A))`.
    Linear,
    /// `slope_hi` where the first confounder is positive, `slope_lo` elsewhere.
    Grouped { slope_hi: f64, slope_lo: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub d_i: usize,
    pub d_c: usize,
    pub d_a: usize,
    pub k_t: usize,
    /// Confounding strength.
    pub gamma: f64,
    pub effect: EffectKind,
    /// Tweedie power of the outcome law.
    pub rho: f64,
    /// Tweedie dispersion.
    pub phi: f64,
    pub sigma_t: f64,
    /// Treatment level shared by every sample before covariate and noise shifts.
    /// Keep it several treatment standard deviations above zero: the mean outcome
    /// uses `max(t, 0)`, which a linear sensitivity head cannot represent.
    pub t_offset: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 20_000,
            d_i: 2,
            d_c: 3,
            d_a: 2,
            k_t: 2,
            gamma: 1.0,
            effect: EffectKind::Constant { c: 0.5 },
            rho: 1.5,
            phi: 0.5,
            sigma_t: 1.5,
            t_offset: 8.0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MtdmlError::Config(msg));
        if self.n == 0 || self.d_c == 0 || self.k_t == 0 {
            return bad("n, d_c and k_t must be >= 1".into());
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.rho > 1.0 && self.rho < 2.0) {
            return bad(format!("rho must lie in (1, 2), got {}", self.rho));
        }
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            return bad(format!("phi must be > 0, got {}", self.phi));
        }
        if !(self.sigma_t >= 0.0) || !self.sigma_t.is_finite() || !self.t_offset.is_finite() {
            return bad("sigma_t must be >= 0 and t_offset finite".into());
        }
        match self.effect {
            EffectKind::Constant { c } if !(c >= 0.0) => bad(format!("constant effect must be >= 0, got {c}")),
            EffectKind::Grouped { slope_hi, slope_lo } if !(slope_hi >= 0.0 && slope_lo >= 0.0) => {
                bad("grouped slopes must be >= 0".into())
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.d_i + self.d_c + self.d_a
    }

    pub fn roles(&self) -> CovariateRoles {
        CovariateRoles {
            d_i: self.d_i,
            d_c: self.d_c,
            d_a: self.d_a,
        }
    }
}

/// Index-block layout of the covariates: `[I | C | A]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateRoles {
    pub d_i: usize,
    pub d_c: usize,
    pub d_a: usize,
}

impl CovariateRoles {
    pub fn first_confounder(&self) -> usize {
        self.d_i
    }
}

/// Per-sample ground truth of the outcome mean `mu(x, t) = mu0(x) + Σ_k kappa_k(x)·max(t_k, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub kappa: Tensor2,
    pub mu0: Vec<f64>,
}

impl GroundTruth {
    /// Outcome mean of sample `i` under treatment `t`.
    pub fn mean_outcome(&self, i: usize, t: &[f64]) -> f64 {
        let shift: f64 = self.kappa.row(i).iter().zip(t).map(|(k, tv)| k * tv.max(0.0)).sum();
        (self.mu0[i] + shift).max(MU_FLOOR)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor2,
    pub t: Tensor2,
    pub y: Vec<f64>,
    pub truth: Option<GroundTruth>,
    pub roles: Option<CovariateRoles>,
}

impl Dataset {
    pub fn new(x: Tensor2, t: Tensor2, y: Vec<f64>) -> Result<Self> {
        let ds = Dataset {
            x,
            t,
            y,
            truth: None,
            roles: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.t.rows() != n || self.y.len() != n {
            return Err(MtdmlError::dim(
                "dataset rows",
                n,
                format!("t: {}, y: {}", self.t.rows(), self.y.len()),
            ));
        }
        if let Some(i) = self.y.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(MtdmlError::Parse {
                row: i + 1,
                column: "y".into(),
                message: format!("outcome must be finite and >= 0, got {}", self.y[i]),
            });
        }
        if let Some(truth) = &self.truth {
            if truth.kappa.shape() != self.t.shape() || truth.mu0.len() != n {
                return Err(MtdmlError::dim("ground truth shape", n, truth.mu0.len()));
            }
            if truth.kappa.as_slice().iter().any(|&k| !(k >= 0.0)) {
                return Err(MtdmlError::Config("true sensitivities must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn treatment_dim(&self) -> usize {
        self.t.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            t: self.t.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            truth: self.truth.as_ref().map(|g| GroundTruth {
                kappa: g.kappa.select_rows(idx),
                mu0: idx.iter().map(|&i| g.mu0[i]).collect(),
            }),
            roles: self.roles,
        }
    }

    /// Rows in the high-slope group of the grouped design (first confounder > 0).
    pub fn high_slope_group(&self) -> Option<Vec<bool>> {
        let col = self.roles?.first_confounder();
        Some((0..self.len()).map(|i| self.x.get(i, col) > 0.0).collect())
    }

    pub fn summary(&self) -> DatasetSummary {
        let n = self.len();
        let zeros = self.y.iter().filter(|&&v| v == 0.0).count();
        DatasetSummary {
            n,
            d: self.dim(),
            k_t: self.treatment_dim(),
            zero_fraction: if n == 0 { 0.0 } else { zeros as f64 / n as f64 },
            y_mean: mean(&self.y),
            y_skewness: skewness(&self.y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d: usize,
    pub k_t: usize,
    pub zero_fraction: f64,
    pub y_mean: f64,
    pub y_skewness: f64,
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Moment skewness `m3 / m2^1.5`.
pub fn skewness(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len().max(1) as f64;
    let m2 = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|a| (a - m).powi(3)).sum::<f64>() / n;
    if m2 > 0.0 {
        m3 / m2.powf(1.5)
    } else {
        0.0
    }
}

struct Coefficients {
    /// Treatment loadings on `[I | C]`, one row per treatment dimension.
    w: Vec<Vec<f64>>,
    /// Baseline-outcome loadings on `[C | A]`.
    u: Vec<f64>,
    /// Sensitivity loadings on `[C | A]` for the linear effect kind.
    v: Vec<Vec<f64>>,
}

impl Coefficients {
    /// Magnitudes in [0.5, 1.5]. Confounder loadings of both the treatment and the
    /// baseline outcome are positive so that `gamma` sets a consistent bias direction;
    /// all other signs are random.
    fn draw(cfg: &DgpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let magnitude = |rng: &mut ChaCha8Rng, signed: bool| {
            let m = rng.random_range(0.5..1.5);
            if signed && rng.random_bool(0.5) {
                -m
            } else {
                m
            }
        };
        let w = (0..cfg.k_t)
            .map(|_| {
                (0..cfg.d_i + cfg.d_c)
                    .map(|j| magnitude(&mut rng, j < cfg.d_i))
                    .collect()
            })
            .collect();
        let u = (0..cfg.d_c + cfg.d_a)
            .map(|j| magnitude(&mut rng, j >= cfg.d_c))
            .collect();
        let v = (0..cfg.k_t)
            .map(|_| (0..cfg.d_c + cfg.d_a).map(|_| magnitude(&mut rng, true)).collect())
            .collect();
        Coefficients { w, u, v }
    }
}

struct SampleRow {
    x: Vec<f64>,
    t: Vec<f64>,
    y: f64,
    kappa: Vec<f64>,
    mu0: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn draw_sample(cfg: &DgpConfig, coef: &Coefficients, index: usize) -> Result<SampleRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Stream 0 holds the coefficients; sample i owns stream i + 1.
    rng.set_stream(index as u64 + 1);
    let d = cfg.dim();
    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let x_ic = &x[..cfg.d_i + cfg.d_c];
    let x_ca = &x[cfg.d_i..];
    let norm_ic = ((cfg.d_i + cfg.d_c) as f64).sqrt();
    let norm_ca = ((cfg.d_c + cfg.d_a) as f64).sqrt();

    let t: Vec<f64> = coef
        .w
        .iter()
        .map(|w| {
            let noise: f64 = rng.sample(StandardNormal);
            cfg.t_offset + cfg.gamma * dot(w, x_ic) / norm_ic + cfg.sigma_t * noise
        })
        .collect();
    let kappa: Vec<f64> = match cfg.effect {
        EffectKind::Constant { c } => vec![c; cfg.k_t],
        EffectKind::Linear => coef.v.iter().map(|v| softplus(dot(v, x_ca) / norm_ca)).collect(),
        EffectKind::Grouped { slope_hi, slope_lo } => {
            let s = if x[cfg.d_i] > 0.0 { slope_hi } else { slope_lo };
            vec![s; cfg.k_t]
        }
    };
    let mu0 = softplus(dot(&coef.u, x_ca) / norm_ca) + 0.1;
    let mu = (mu0 + kappa.iter().zip(&t).map(|(k, tv)| k * tv.max(0.0)).sum::<f64>()).max(MU_FLOOR);
    let y = sample_tweedie(&mut rng, mu, cfg.rho, cfg.phi)?;
    Ok(SampleRow { x, t, y, kappa, mu0 })
}

/// Poisson rate of the compound representation, `mu^(2-rho) / (phi (2-rho))`.
pub fn tweedie_poisson_rate(mu: f64, rho: f64, phi: f64) -> f64 {
    mu.powf(2.0 - rho) / (phi * (2.0 - rho))
}

/// One exact Tweedie draw: a Poisson number of Gamma jumps.
pub fn sample_tweedie<R: Rng + ?Sized>(rng: &mut R, mu: f64, rho: f64, phi: f64) -> Result<f64> {
    let lambda = tweedie_poisson_rate(mu, rho, phi);
    let shape = (2.0 - rho) / (rho - 1.0);
    let scale = phi * (rho - 1.0) * mu.powf(rho - 1.0);
    let count = Poisson::new(lambda)
        .map_err(|e| MtdmlError::Domain(format!("Poisson rate {lambda}: {e}")))?
        .sample(rng) as u64;
    let jump = Gamma::new(shape, scale).map_err(|e| MtdmlError::Domain(format!("Gamma({shape}, {scale}): {e}")))?;
    Ok((0..count).map(|_| jump.sample(rng)).sum())
}

/// Draws a dataset with ground truth. Each sample uses its own counter-based
/// random stream, so results do not depend on the thread count.
pub fn generate_synthetic(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let coef = Coefficients::draw(cfg);
    let rows: Vec<SampleRow> = (0..cfg.n)
        .into_par_iter()
        .map(|i| draw_sample(cfg, &coef, i))
        .collect::<Result<_>>()?;
    let d = cfg.dim();
    let mut x = Vec::with_capacity(cfg.n * d);
    let mut t = Vec::with_capacity(cfg.n * cfg.k_t);
    let mut kappa = Vec::with_capacity(cfg.n * cfg.k_t);
    let mut y = Vec::with_capacity(cfg.n);
    let mut mu0 = Vec::with_capacity(cfg.n);
    for r in rows {
        x.extend(r.x);
        t.extend(r.t);
        kappa.extend(r.kappa);
        y.push(r.y);
        mu0.push(r.mu0);
    }
    let ds = Dataset {
        x: Tensor2::from_vec(cfg.n, d, x)?,
        t: Tensor2::from_vec(cfg.n, cfg.k_t, t)?,
        y,
        truth: Some(GroundTruth {
            kappa: Tensor2::from_vec(cfg.n, cfg.k_t, kappa)?,
            mu0,
        }),
        roles: Some(cfg.roles()),
    };
    ds.validate()?;
    Ok(ds)
}

/// True per-sample effect of moving from `t_from` to `t_to`, and its mean.
pub fn true_contrast(truth: Option<&GroundTruth>, t_from: &[f64], t_to: &[f64]) -> Result<(Vec<f64>, f64)> {
    let truth = truth.ok_or_else(|| MtdmlError::Capability("dataset carries no ground-truth effects".into()))?;
    let k_t = truth.kappa.cols();
    if t_from.len() != k_t || t_to.len() != k_t {
        return Err(MtdmlError::dim("contrast length", k_t, t_from.len().max(t_to.len())));
    }
    let step: Vec<f64> = t_to.iter().zip(t_from).map(|(b, a)| b.max(0.0) - a.max(0.0)).collect();
    let tau: Vec<f64> = (0..truth.kappa.rows()).map(|i| dot(truth.kappa.row(i), &step)).collect();
    let ate = mean(&tau);
    Ok((tau, ate))
}

fn header(ds: &Dataset) -> Vec<String> {
    let mut h: Vec<String> = (0..ds.dim()).map(|j| format!("x_{j}")).collect();
    h.extend((0..ds.treatment_dim()).map(|k| format!("t_{k}")));
    h.push("y".into());
    if ds.truth.is_some() {
        h.extend((0..ds.treatment_dim()).map(|k| format!("kappa_true_{k}")));
        h.push("mu0_true".into());
    }
    h
}

/// Writes the dataset as UTF-8 CSV with a header row. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| MtdmlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| MtdmlError::io(path, e);
    writeln!(w, "{}", header(ds).join(",")).map_err(io)?;
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        let mut push = |v: f64| {
            if !line.is_empty() {
                line.push(',');
            }
            line.push_str(&v.to_string());
        };
        ds.x.row(i).iter().for_each(|&v| push(v));
        ds.t.row(i).iter().for_each(|&v| push(v));
        push(ds.y[i]);
        if let Some(g) = &ds.truth {
            g.kappa.row(i).iter().for_each(|&v| push(v));
            push(g.mu0[i]);
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn indexed_columns(names: &[String], prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    while let Some(pos) = names.iter().position(|n| *n == format!("{prefix}{}", out.len())) {
        out.push(pos);
    }
    out
}

/// Reads a dataset written by [`save_csv`] or any CSV with the same column names.
/// Rows in errors are 1-based data rows (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let missing = |column: &str| MtdmlError::Parse {
        row: 0,
        column: column.into(),
        message: "required column missing from header".into(),
    };
    let xs = indexed_columns(&names, "x_");
    if xs.is_empty() {
        return Err(missing("x_0"));
    }
    let ts = indexed_columns(&names, "t_");
    if ts.is_empty() {
        return Err(missing("t_0"));
    }
    let y_col = names.iter().position(|n| n == "y").ok_or_else(|| missing("y"))?;
    let ks = indexed_columns(&names, "kappa_true_");
    let mu0_col = names.iter().position(|n| n == "mu0_true");
    let has_truth = !ks.is_empty() || mu0_col.is_some();
    if has_truth {
        if ks.len() != ts.len() {
            return Err(missing(&format!("kappa_true_{}", ks.len())));
        }
        if mu0_col.is_none() {
            return Err(missing("mu0_true"));
        }
    }

    let (mut x, mut t, mut y, mut kappa, mut mu0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| MtdmlError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).ok_or_else(|| MtdmlError::Parse {
                row,
                column: names[c].clone(),
                message: "missing cell".into(),
            })?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| MtdmlError::Parse {
                    row,
                    column: names[c].clone(),
                    message: format!("not a finite number: {raw:?}"),
                })
        };
        for &c in &xs {
            x.push(cell(c)?);
        }
        for &c in &ts {
            t.push(cell(c)?);
        }
        let yv = cell(y_col)?;
        if yv < 0.0 {
            return Err(MtdmlError::Parse {
                row,
                column: "y".into(),
                message: format!("outcome must be >= 0, got {yv}"),
            });
        }
        y.push(yv);
        if has_truth {
            for &c in &ks {
                kappa.push(cell(c)?);
            }
            mu0.push(cell(mu0_col.expect("checked"))?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(MtdmlError::Parse {
            row: 0,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let ds = Dataset {
        x: Tensor2::from_vec(n, xs.len(), x)?,
        t: Tensor2::from_vec(n, ts.len(), t)?,
        y,
        truth: if has_truth {
            Some(GroundTruth {
                kappa: Tensor2::from_vec(n, ks.len(), kappa)?,
                mu0,
            })
        } else {
            None
        },
        roles: None,
    };
    ds.validate()?;
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> MtdmlError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MtdmlError::io(path, io),
        other => MtdmlError::Parse {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}
