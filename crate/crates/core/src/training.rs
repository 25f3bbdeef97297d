//! Feature scaling, mini-batch training and two-fold cross-fitting.
//!
//! Cross-fitting splits the data into folds A and B. Model A fits its propensity
//! networks on A and its sensitivity network on B, using residual treatments from
//! the A-trained propensity networks; model B does the mirror image. Predictions
//! are the mean of the two models.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mean, Dataset};
use crate::error::{MtdmlError, Result};
use crate::losses::LossWeights;
use crate::model::{LossBreakdown, ModelConfig, MtdmlModel, Objective, OutcomeLoss, Stage};
use crate::nn::{AdamState, Tensor2};

pub const MODEL_VERSION: &str = "mtdml-model-v1";
pub const ENSEMBLE_VERSION: &str = "mtdml-ensemble-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Propensity and causal stages on opposite folds.
    Crossfit,
    /// The full objective on each model's own fold.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub folds: usize,
    pub mode: TrainMode,
    pub use_ica_disentangle: bool,
    pub use_tweedie: bool,
    /// Epochs without a drop in training loss before a stage stops.
    pub patience: usize,
    pub model: ModelConfig,
    /// Worker threads for the two cross-fit rounds.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            folds: 2,
            mode: TrainMode::Crossfit,
            use_ica_disentangle: true,
            use_tweedie: true,
            patience: 20,
            model: ModelConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MtdmlError::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.folds != 2 {
            return Err(MtdmlError::Config(format!("cross-fitting uses exactly 2 folds, got {}", self.folds)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(MtdmlError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.weights,
            outcome: if self.use_tweedie {
                OutcomeLoss::Tweedie
            } else {
                OutcomeLoss::Squared
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            disentangle: self.use_ica_disentangle,
            ..self.model.clone()
        }
    }
}

/// Per-covariate standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Tensor2) -> Result<Scaler> {
        if x.rows() < 2 {
            return Err(MtdmlError::Degenerate(format!("scaler needs >= 2 rows, got {}", x.rows())));
        }
        let n = x.rows() as f64;
        let mut means = x.sum_rows();
        means.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((v, &xv), m) in var.iter_mut().zip(x.row(r)).zip(&means) {
                *v += (xv - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        if let Some(j) = std.iter().zip(&means).position(|(&s, m)| !(s > 1e-12 * (1.0 + m.abs()))) {
            return Err(MtdmlError::Degenerate(format!("covariate x_{j} has zero variance")));
        }
        Ok(Scaler { mean: means, std })
    }

    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.mean.len() {
            return Err(MtdmlError::dim("scaler columns", self.mean.len(), x.cols()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Outcome of one training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    /// Mean training loss per epoch.
    pub trace: Vec<f64>,
    /// Epoch-mean loss terms of the last epoch.
    pub last: LossBreakdown,
}

impl StageReport {
    pub fn epochs_run(&self) -> usize {
        self.trace.len()
    }
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn with_context(e: MtdmlError, epoch: usize, batch: usize) -> MtdmlError {
    match e {
        MtdmlError::Numeric { term } => MtdmlError::numeric(format!("{term} at epoch {epoch}, batch {batch}")),
        MtdmlError::Domain(msg) => MtdmlError::Domain(format!("{msg} at epoch {epoch}, batch {batch}")),
        other => other,
    }
}

/// Minimizes the stage objective with Adam over shuffled mini-batches. `x` must
/// already be scaled. Only the networks trained by `stage` are modified.
pub fn train_stage(
    model: &mut MtdmlModel,
    x: &Tensor2,
    t: &Tensor2,
    y: &[f64],
    stage: Stage,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<StageReport> {
    if x.rows() == 0 {
        return Err(MtdmlError::Config("cannot train on an empty dataset".into()));
    }
    let objective = cfg.objective();
    let mut rng = seeded(cfg.seed, shuffle_seed);
    let mut optimizers: Vec<AdamState> = model
        .trainable_mut(stage)
        .into_iter()
        .map(|net| AdamState::new(net, cfg.learning_rate))
        .collect();
    let causal = if stage == Stage::Causal {
        Some(model.causal_features(x, t)?)
    } else {
        None
    };

    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = StageReport {
        stage: Some(stage),
        ..Default::default()
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let loss = match &causal {
                Some(feats) => model.causal_loss_and_grads(&feats.select_rows(idx), &yb, &objective),
                None => model.loss_and_grads(&x.select_rows(idx), &t.select_rows(idx), &yb, &objective, stage),
            }
            .map_err(|e| with_context(e, epoch, b))?;
            for (net, opt) in model.trainable_mut(stage).into_iter().zip(optimizers.iter_mut()) {
                opt.step(net);
            }
            let w = idx.len() as f64 / n as f64;
            sums.treatment += w * loss.treatment;
            sums.outcome += w * loss.outcome;
            sums.final_ += w * loss.final_;
            sums.rlo += w * loss.rlo;
            sums.k_reg += w * loss.k_reg;
            sums.total += w * loss.total;
        }
        if !sums.total.is_finite() {
            return Err(MtdmlError::numeric(format!("epoch {epoch} mean loss")));
        }
        report.trace.push(sums.total);
        report.last = sums;
        if sums.total < best {
            best = sums.total;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub first: StageReport,
    pub second: Option<StageReport>,
}

/// Loss traces of both cross-fit rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub model_a: RoundReport,
    pub model_b: RoundReport,
}

/// Averaged predictions of the two cross-fitted models.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub y_final: Vec<f64>,
    pub kappa: Tensor2,
    pub t_hat: Tensor2,
    pub y_base: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossFitEnsemble {
    pub model_a: MtdmlModel,
    pub model_b: MtdmlModel,
    pub scaler: Scaler,
    /// 0 for fold A, 1 for fold B, per training row.
    pub folds: Vec<u8>,
    pub fold_seed: u64,
    pub diagnostics: TrainDiagnostics,
}

/// Seeded shuffle into two folds; the first gets the extra row when `n` is odd.
pub fn split_folds(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed, 0));
    let cut = n.div_ceil(2);
    let b = idx.split_off(cut);
    (idx, b)
}

fn train_round(
    ds: &Dataset,
    xs: &Tensor2,
    own: &[usize],
    other: &[usize],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<(MtdmlModel, RoundReport)> {
    let mut model = MtdmlModel::new(ds.dim(), ds.treatment_dim(), cfg.model_config(), &mut seeded(cfg.seed, stream))?;
    let (x1, t1) = (xs.select_rows(own), ds.t.select_rows(own));
    let y1: Vec<f64> = own.iter().map(|&i| ds.y[i]).collect();
    let mean_t: Vec<f64> = (0..ds.treatment_dim()).map(|k| mean(&t1.column(k))).collect();
    model.init_output_biases(&mean_t, mean(&y1))?;
    match cfg.mode {
        TrainMode::Crossfit => {
            let first = train_stage(&mut model, &x1, &t1, &y1, Stage::Propensity, cfg, stream + 10)?;
            let (x2, t2) = (xs.select_rows(other), ds.t.select_rows(other));
            let y2: Vec<f64> = other.iter().map(|&i| ds.y[i]).collect();
            let second = train_stage(&mut model, &x2, &t2, &y2, Stage::Causal, cfg, stream + 20)?;
            Ok((
                model,
                RoundReport {
                    first,
                    second: Some(second),
                },
            ))
        }
        TrainMode::Joint => {
            let first = train_stage(&mut model, &x1, &t1, &y1, Stage::Joint, cfg, stream + 10)?;
            Ok((model, RoundReport { first, second: None }))
        }
    }
}

/// Trains the two-fold ensemble.
pub fn crossfit_train(ds: &Dataset, cfg: &TrainConfig) -> Result<CrossFitEnsemble> {
    cfg.validate()?;
    ds.validate()?;
    if ds.len() < 2 * cfg.batch_size {
        return Err(MtdmlError::Config(format!(
            "need at least 2 x batch_size = {} rows, got {}",
            2 * cfg.batch_size,
            ds.len()
        )));
    }
    let scaler = Scaler::fit(&ds.x)?;
    let xs = scaler.apply(&ds.x)?;
    let (fold_a, fold_b) = split_folds(ds.len(), cfg.seed);

    let ((model_a, rep_a), (model_b, rep_b)) = if cfg.threads >= 2 {
        std::thread::scope(|s| {
            let ha = s.spawn(|| train_round(ds, &xs, &fold_a, &fold_b, cfg, 1));
            let rb = train_round(ds, &xs, &fold_b, &fold_a, cfg, 2);
            let ra = ha.join().map_err(|_| MtdmlError::State("cross-fit worker panicked".into()))?;
            Ok::<_, MtdmlError>((ra?, rb?))
        })?
    } else {
        (
            train_round(ds, &xs, &fold_a, &fold_b, cfg, 1)?,
            train_round(ds, &xs, &fold_b, &fold_a, cfg, 2)?,
        )
    };

    let mut folds = vec![0u8; ds.len()];
    for &i in &fold_b {
        folds[i] = 1;
    }
    Ok(CrossFitEnsemble {
        model_a,
        model_b,
        scaler,
        folds,
        fold_seed: cfg.seed,
        diagnostics: TrainDiagnostics {
            model_a: rep_a,
            model_b: rep_b,
        },
    })
}

fn average(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

fn average_t(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    a.zip_with(b, "ensemble average", |x, y| 0.5 * (x + y))
}

impl CrossFitEnsemble {
    pub fn input_dim(&self) -> usize {
        self.model_a.input_dim
    }

    pub fn treatment_dim(&self) -> usize {
        self.model_a.treatment_dim
    }

    /// Rows of `x` are raw (unscaled) covariates.
    pub fn predict(&self, x: &Tensor2, t: &Tensor2) -> Result<EnsemblePrediction> {
        let xs = self.scaler.apply(x)?;
        let a = self.model_a.forward(&xs, t)?;
        let b = self.model_b.forward(&xs, t)?;
        Ok(EnsemblePrediction {
            y_final: average(&a.y_final, &b.y_final),
            kappa: average_t(&a.kappa, &b.kappa)?,
            t_hat: average_t(&a.t_hat, &b.t_hat)?,
            y_base: average(&a.y_base, &b.y_base),
        })
    }

    pub fn uplift(&self, x: &Tensor2, t_from: &[f64], t_to: &[f64]) -> Result<Vec<f64>> {
        let xs = self.scaler.apply(x)?;
        Ok(average(
            &self.model_a.uplift(&xs, t_from, t_to)?,
            &self.model_b.uplift(&xs, t_from, t_to)?,
        ))
    }

    pub fn sensitivity(&self, x: &Tensor2) -> Result<Tensor2> {
        let xs = self.scaler.apply(x)?;
        average_t(&self.model_a.sensitivity(&xs)?, &self.model_b.sensitivity(&xs)?)
    }

    pub fn to_document(&self) -> EnsembleDocument {
        let doc = |m: &MtdmlModel| ModelDocument {
            version: MODEL_VERSION.into(),
            model: m.clone(),
            scaler: Some(self.scaler.clone()),
        };
        EnsembleDocument {
            version: ENSEMBLE_VERSION.into(),
            model_a: doc(&self.model_a),
            model_b: doc(&self.model_b),
            scaler: self.scaler.clone(),
            fold_seed: self.fold_seed,
            folds: self.folds.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_document(doc: EnsembleDocument) -> Result<Self> {
        if doc.version != ENSEMBLE_VERSION {
            return Err(MtdmlError::Config(format!(
                "unsupported ensemble version {:?}, expected {ENSEMBLE_VERSION:?}",
                doc.version
            )));
        }
        let model_a = doc.model_a.into_model()?;
        let model_b = doc.model_b.into_model()?;
        if model_a.input_dim != model_b.input_dim
            || model_a.treatment_dim != model_b.treatment_dim
            || doc.scaler.mean.len() != model_a.input_dim
        {
            return Err(MtdmlError::dim("ensemble members", model_a.input_dim, model_b.input_dim));
        }
        Ok(CrossFitEnsemble {
            model_a,
            model_b,
            scaler: doc.scaler,
            folds: doc.folds,
            fold_seed: doc.fold_seed,
            diagnostics: doc.diagnostics,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| MtdmlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MtdmlError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Serialized single model: configuration, every weight matrix, signs, floor and
/// optionally the scaler it expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: String,
    pub model: MtdmlModel,
    pub scaler: Option<Scaler>,
}

impl ModelDocument {
    pub fn into_model(self) -> Result<MtdmlModel> {
        if self.version != MODEL_VERSION {
            return Err(MtdmlError::Config(format!(
                "unsupported model version {:?}, expected {MODEL_VERSION:?}",
                self.version
            )));
        }
        self.model.validate()?;
        Ok(self.model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDocument {
    pub version: String,
    pub model_a: ModelDocument,
    pub model_b: ModelDocument,
    pub scaler: Scaler,
    pub fold_seed: u64,
    pub folds: Vec<u8>,
    pub diagnostics: TrainDiagnostics,
}
