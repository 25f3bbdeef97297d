//! S- and T-learner comparators over a binary treatment flag.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MtdmlError, Result};
use crate::losses::squared_error;
use crate::nn::{Activation, AdamState, Mlp, MlpSpec, Tensor2};
use crate::training::{seeded, Scaler};

pub const BASELINE_VERSION: &str = "mtdml-baseline-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerKind {
    /// One regressor on `[x, flag]`.
    S,
    /// One regressor per arm.
    T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden: vec![64, 32],
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MtdmlError::Config("baseline epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(MtdmlError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.hidden.contains(&0) {
            return Err(MtdmlError::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub version: String,
    pub kind: LearnerKind,
    /// S: one net; T: control net then treated net.
    pub nets: Vec<Mlp>,
    pub scaler: Scaler,
}

fn regressor(inputs: usize, cfg: &BaselineConfig, stream: u64) -> Result<Mlp> {
    let mut widths = vec![inputs];
    widths.extend(&cfg.hidden);
    widths.push(1);
    Mlp::new(MlpSpec::uniform(widths, Activation::Relu, Activation::Identity)?, &mut seeded(cfg.seed, stream))
}

fn with_flag(xs: &Tensor2, flag: f64) -> Result<Tensor2> {
    Tensor2::hconcat(&[xs, &Tensor2::filled(xs.rows(), 1, flag)])
}

fn fit_regressor(net: &mut Mlp, x: &Tensor2, y: &[f64], cfg: &BaselineConfig, stream: u64) -> Result<()> {
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    if let Some(last) = net.layers_mut().last_mut() {
        last.bias[0] = mean_y;
    }
    let mut opt = AdamState::new(net, cfg.learning_rate);
    let mut rng = seeded(cfg.seed, stream);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let (out, cache) = net.forward(&x.select_rows(idx))?;
            let (loss, grad) = squared_error(&yb, out.as_slice())?;
            if !loss.is_finite() {
                return Err(MtdmlError::numeric(format!("baseline loss at epoch {epoch}")));
            }
            net.backward(&cache, &Tensor2::column_vector(&grad))?;
            opt.step(net);
        }
    }
    Ok(())
}

/// Fits a baseline on raw covariates `x`, binary `treated` flags and outcomes `y`.
pub fn baseline_train(
    kind: LearnerKind,
    x: &Tensor2,
    treated: &[bool],
    y: &[f64],
    cfg: &BaselineConfig,
) -> Result<BaselineModel> {
    cfg.validate()?;
    if treated.len() != x.rows() || y.len() != x.rows() {
        return Err(MtdmlError::dim("baseline rows", x.rows(), treated.len().min(y.len())));
    }
    let scaler = Scaler::fit(x)?;
    let xs = scaler.apply(x)?;
    let nets = match kind {
        LearnerKind::S => {
            let flags: Vec<f64> = treated.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
            let input = Tensor2::hconcat(&[&xs, &Tensor2::column_vector(&flags)])?;
            let mut net = regressor(x.cols() + 1, cfg, 100)?;
            fit_regressor(&mut net, &input, y, cfg, 110)?;
            vec![net]
        }
        LearnerKind::T => {
            let mut nets = Vec::with_capacity(2);
            for (arm, stream) in [(false, 101), (true, 102)] {
                let rows: Vec<usize> = (0..x.rows()).filter(|&i| treated[i] == arm).collect();
                if rows.is_empty() {
                    let name = if arm { "treated" } else { "control" };
                    return Err(MtdmlError::Degenerate(format!("T-learner: {name} arm is empty")));
                }
                let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                let mut net = regressor(x.cols(), cfg, stream)?;
                fit_regressor(&mut net, &xs.select_rows(&rows), &yr, cfg, stream + 10)?;
                nets.push(net);
            }
            nets
        }
    };
    Ok(BaselineModel {
        version: BASELINE_VERSION.into(),
        kind,
        nets,
        scaler,
    })
}

impl BaselineModel {
    pub fn validate(&self) -> Result<()> {
        if self.version != BASELINE_VERSION {
            return Err(MtdmlError::Config(format!(
                "unsupported baseline version {:?}, expected {BASELINE_VERSION:?}",
                self.version
            )));
        }
        let expected = match self.kind {
            LearnerKind::S => 1,
            LearnerKind::T => 2,
        };
        if self.nets.len() != expected {
            return Err(MtdmlError::dim("baseline net count", expected, self.nets.len()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.scaler.mean.len()
    }

    /// Outcome prediction with the flag set to `flag`. The T-learner uses the
    /// treated net when `flag > 0.5`.
    pub fn predict(&self, x: &Tensor2, flag: f64) -> Result<Vec<f64>> {
        let xs = self.scaler.apply(x)?;
        let out = match self.kind {
            LearnerKind::S => self.nets[0].predict(&with_flag(&xs, flag)?)?,
            LearnerKind::T => self.nets[usize::from(flag > 0.5)].predict(&xs)?,
        };
        Ok(out.into_vec())
    }

    /// Outcome prediction at each sample's own flag.
    pub fn predict_observed(&self, x: &Tensor2, treated: &[bool]) -> Result<Vec<f64>> {
        if treated.len() != x.rows() {
            return Err(MtdmlError::dim("baseline flags", x.rows(), treated.len()));
        }
        let (y1, y0) = (self.predict(x, 1.0)?, self.predict(x, 0.0)?);
        Ok(treated.iter().enumerate().map(|(i, &f)| if f { y1[i] } else { y0[i] }).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: BaselineModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| MtdmlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| MtdmlError::io(path, e))?)
    }
}

/// `f(x, 1) - f(x, 0)` for S, `f1(x) - f0(x)` for T.
pub fn baseline_tau(model: &BaselineModel, x: &Tensor2) -> Result<Vec<f64>> {
    let (y1, y0) = (model.predict(x, 1.0)?, model.predict(x, 0.0)?);
    Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
}
