//! The multi-treatment network.
//!
//! A shared bottom feeds three factor heads producing instrumental, confounder and
//! adjustment embeddings. Treatment is predicted from `[I, C]`, the baseline outcome
//! from `[C, A]` through an exponential link, and the per-dimension sensitivity from
//! `[I, C, A]` through a softplus. The final outcome is
//!
//! ```text
//! y_final = max(y_base + Σ_k sign_k · kappa_k · Δt_k, y_floor)
//! ```
//!
//! which is non-decreasing in every `sign_k · Δt_k` for any parameter values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MtdmlError, Result};
use crate::losses::{self, LossWeights};
use crate::nn::{Activation, Mlp, MlpCache, MlpSpec, Tensor2};

/// Largest exponent passed to the outcome link before clamping.
pub const MAX_LOG_OUTCOME: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared-bottom width.
    pub hidden: usize,
    /// Width of each factor embedding.
    pub rep: usize,
    /// Hidden width inside the treatment, outcome and sensitivity networks.
    pub head_hidden: usize,
    pub y_floor: f64,
    /// When false a single embedding stands in for all three factors.
    pub disentangle: bool,
    /// Monotone direction per treatment dimension; all `+1` when absent.
    pub signs: Option<Vec<i8>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            rep: 16,
            head_hidden: 32,
            y_floor: 1e-6,
            disentangle: true,
            signs: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.rep == 0 || self.head_hidden == 0 {
            return Err(MtdmlError::Config("model widths must be >= 1".into()));
        }
        if !(self.y_floor > 0.0) || !self.y_floor.is_finite() {
            return Err(MtdmlError::Config(format!("y_floor must be > 0, got {}", self.y_floor)));
        }
        if let Some(signs) = &self.signs {
            check_signs(signs)?;
        }
        Ok(())
    }
}

fn check_signs(signs: &[i8]) -> Result<()> {
    match signs.iter().find(|&&s| s != 1 && s != -1) {
        Some(bad) => Err(MtdmlError::Config(format!("monotone signs must be +1 or -1, got {bad}"))),
        None => Ok(()),
    }
}

/// Which parameter groups a loss evaluation trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Treatment and outcome losses plus the orthogonality penalty.
    Propensity,
    /// Final-outcome loss plus the sensitivity penalty, with everything but the
    /// sensitivity network frozen.
    Causal,
    /// Every term, every parameter.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLoss {
    Tweedie,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: LossWeights,
    pub outcome: OutcomeLoss,
}

impl Objective {
    fn outcome_loss(&self, y: &[f64], y_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.outcome {
            OutcomeLoss::Tweedie => losses::tweedie_nll(y, y_hat, self.weights.rho),
            OutcomeLoss::Squared => losses::squared_error(y, y_hat),
        }
    }
}

/// Per-term values of one loss evaluation. Terms not part of the stage are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub treatment: f64,
    pub outcome: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub rlo: f64,
    pub k_reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub rep_i: Tensor2,
    pub rep_c: Tensor2,
    pub rep_a: Tensor2,
    pub t_hat: Tensor2,
    pub y_base: Vec<f64>,
    pub kappa: Tensor2,
    pub delta_t: Tensor2,
    pub y_final: Vec<f64>,
    /// Rows whose outcome exponent hit [`MAX_LOG_OUTCOME`].
    pub exp_clamped: usize,
}

/// Frozen propensity quantities consumed by the causal stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalFeatures {
    pub upsilon: Tensor2,
    pub y_base: Vec<f64>,
    pub delta_t: Tensor2,
}

impl CausalFeatures {
    pub fn rows(&self) -> usize {
        self.y_base.len()
    }

    pub fn select_rows(&self, idx: &[usize]) -> CausalFeatures {
        CausalFeatures {
            upsilon: self.upsilon.select_rows(idx),
            y_base: idx.iter().map(|&i| self.y_base[i]).collect(),
            delta_t: self.delta_t.select_rows(idx),
        }
    }
}

/// `max(y_base + Σ_k kappa_k · sign_k · Δt_k, y_floor)` per row.
pub fn monotonic_head(
    kappa: &Tensor2,
    delta_t: &Tensor2,
    signs: &[f64],
    y_base: &[f64],
    y_floor: f64,
) -> Result<Vec<f64>> {
    Ok(monotonic_head_masked(kappa, delta_t, signs, y_base, y_floor)?.0)
}

fn monotonic_head_masked(
    kappa: &Tensor2,
    delta_t: &Tensor2,
    signs: &[f64],
    y_base: &[f64],
    y_floor: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if kappa.shape() != delta_t.shape() {
        return Err(MtdmlError::dim(
            "monotonic_head kappa vs delta_t",
            format!("{:?}", kappa.shape()),
            format!("{:?}", delta_t.shape()),
        ));
    }
    if signs.len() != kappa.cols() {
        return Err(MtdmlError::dim("monotonic_head signs", kappa.cols(), signs.len()));
    }
    if y_base.len() != kappa.rows() {
        return Err(MtdmlError::dim("monotonic_head y_base", kappa.rows(), y_base.len()));
    }
    let mut out = Vec::with_capacity(y_base.len());
    let mut clamped = Vec::with_capacity(y_base.len());
    for (i, &base) in y_base.iter().enumerate() {
        // kappa * (sign * dt): the sign flip is exact, so rounding stays monotone.
        let shift: f64 = kappa
            .row(i)
            .iter()
            .zip(delta_t.row(i))
            .zip(signs)
            .map(|((&k, &dt), &s)| k * (s * dt))
            .sum();
        let raw = base + shift;
        let is_clamped = !(raw > y_floor);
        clamped.push(is_clamped);
        out.push(if is_clamped { y_floor } else { raw });
    }
    Ok((out, clamped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtdmlModel {
    pub input_dim: usize,
    pub treatment_dim: usize,
    pub config: ModelConfig,
    pub shared_bottom: Mlp,
    pub head_i: Mlp,
    pub head_c: Mlp,
    pub head_a: Mlp,
    pub f_t: Mlp,
    pub f_y: Mlp,
    pub f_k: Mlp,
    signs: Vec<f64>,
}

struct Caches {
    bottom: MlpCache,
    head_i: Option<MlpCache>,
    head_c: MlpCache,
    head_a: Option<MlpCache>,
    f_t: MlpCache,
    f_y: MlpCache,
    f_k: MlpCache,
    y_raw: Vec<f64>,
    clamped: Vec<bool>,
}

impl MtdmlModel {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        treatment_dim: usize,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || treatment_dim == 0 {
            return Err(MtdmlError::Config("input and treatment dimensions must be >= 1".into()));
        }
        let signs = match &config.signs {
            Some(s) if s.len() != treatment_dim => {
                return Err(MtdmlError::dim("monotone signs", treatment_dim, s.len()))
            }
            Some(s) => s.iter().map(|&v| f64::from(v)).collect(),
            None => vec![1.0; treatment_dim],
        };
        let (h, r, hh) = (config.hidden, config.rep, config.head_hidden);
        let relu = Activation::Relu;
        let mut build = |widths: Vec<usize>, out: Activation| -> Result<Mlp> {
            Mlp::new(MlpSpec::uniform(widths, relu, out)?, rng)
        };
        let shared_bottom = build(vec![input_dim, h], relu)?;
        let head_i = build(vec![h, r], relu)?;
        let head_c = build(vec![h, r], relu)?;
        let head_a = build(vec![h, r], relu)?;
        let f_t = build(vec![2 * r, hh, treatment_dim], Activation::Identity)?;
        let f_y = build(vec![2 * r, hh, 1], Activation::Identity)?;
        let f_k = build(vec![3 * r, hh, treatment_dim], Activation::Softplus)?;
        Ok(MtdmlModel {
            input_dim,
            treatment_dim,
            config,
            shared_bottom,
            head_i,
            head_c,
            head_a,
            f_t,
            f_y,
            f_k,
            signs,
        })
    }

    /// Checks the internal shape contract, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (h, r) = (self.config.hidden, self.config.rep);
        let expect = [
            ("shared_bottom", &self.shared_bottom, self.input_dim, h),
            ("head_i", &self.head_i, h, r),
            ("head_c", &self.head_c, h, r),
            ("head_a", &self.head_a, h, r),
            ("f_t", &self.f_t, 2 * r, self.treatment_dim),
            ("f_y", &self.f_y, 2 * r, 1),
            ("f_k", &self.f_k, 3 * r, self.treatment_dim),
        ];
        for (name, net, i, o) in expect {
            if net.input_width() != i || net.output_width() != o {
                return Err(MtdmlError::dim(
                    "model network shape",
                    format!("{name}: {i}->{o}"),
                    format!("{name}: {}->{}", net.input_width(), net.output_width()),
                ));
            }
        }
        if self.f_k.spec().activations.last() != Some(&Activation::Softplus) {
            return Err(MtdmlError::Config("sensitivity network must end in softplus".into()));
        }
        if self.signs.len() != self.treatment_dim || self.signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(MtdmlError::Config("monotone signs must be +1/-1 per treatment dimension".into()));
        }
        Ok(())
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn y_floor(&self) -> f64 {
        self.config.y_floor
    }

    /// Points the treatment and outcome output biases at the data means so training
    /// starts near the marginal fit.
    pub fn init_output_biases(&mut self, mean_t: &[f64], mean_y: f64) -> Result<()> {
        if mean_t.len() != self.treatment_dim {
            return Err(MtdmlError::dim("init_output_biases", self.treatment_dim, mean_t.len()));
        }
        let last_t = self.f_t.layers_mut().last_mut().expect("non-empty");
        last_t.bias.copy_from_slice(mean_t);
        let last_y = self.f_y.layers_mut().last_mut().expect("non-empty");
        last_y.bias[0] = mean_y.max(1e-6).ln();
        Ok(())
    }

    fn check_x(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(MtdmlError::dim("covariate columns", self.input_dim, x.cols()));
        }
        Ok(())
    }

    fn check_t(&self, t: &Tensor2, rows: usize) -> Result<()> {
        if t.cols() != self.treatment_dim || t.rows() != rows {
            return Err(MtdmlError::dim(
                "treatment matrix",
                format!("{rows}x{}", self.treatment_dim),
                format!("{}x{}", t.rows(), t.cols()),
            ));
        }
        Ok(())
    }

    /// Instrumental, confounder and adjustment embeddings.
    pub fn disentangle(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2, Tensor2)> {
        self.check_x(x)?;
        let h = self.shared_bottom.predict(x)?;
        if self.config.disentangle {
            Ok((self.head_i.predict(&h)?, self.head_c.predict(&h)?, self.head_a.predict(&h)?))
        } else {
            let r = self.head_c.predict(&h)?;
            Ok((r.clone(), r.clone(), r))
        }
    }

    pub fn predict_treatment(&self, rep_i: &Tensor2, rep_c: &Tensor2) -> Result<Tensor2> {
        self.f_t.predict(&Tensor2::hconcat(&[rep_i, rep_c])?)
    }

    /// Baseline outcome `exp(f_Y([C, A]))` and the number of rows whose exponent was clamped.
    pub fn predict_outcome(&self, rep_c: &Tensor2, rep_a: &Tensor2) -> Result<(Vec<f64>, usize)> {
        let z = self.f_y.predict(&Tensor2::hconcat(&[rep_c, rep_a])?)?;
        Ok(exp_link(z.as_slice()))
    }

    pub fn predict_sensitivity(&self, rep_i: &Tensor2, rep_c: &Tensor2, rep_a: &Tensor2) -> Result<Tensor2> {
        self.f_k.predict(&Tensor2::hconcat(&[rep_i, rep_c, rep_a])?)
    }

    pub fn forward(&self, x: &Tensor2, t: &Tensor2) -> Result<ForwardOutput> {
        self.check_x(x)?;
        self.check_t(t, x.rows())?;
        let (rep_i, rep_c, rep_a) = self.disentangle(x)?;
        let t_hat = self.predict_treatment(&rep_i, &rep_c)?;
        let (y_base, exp_clamped) = self.predict_outcome(&rep_c, &rep_a)?;
        let kappa = self.predict_sensitivity(&rep_i, &rep_c, &rep_a)?;
        let delta_t = t.sub(&t_hat)?;
        let y_final = monotonic_head(&kappa, &delta_t, &self.signs, &y_base, self.config.y_floor)?;
        Ok(ForwardOutput {
            rep_i,
            rep_c,
            rep_a,
            t_hat,
            y_base,
            kappa,
            delta_t,
            y_final,
            exp_clamped,
        })
    }

    /// Counterfactual outcome change from moving every row's treatment from `t_from` to `t_to`.
    pub fn uplift(&self, x: &Tensor2, t_from: &[f64], t_to: &[f64]) -> Result<Vec<f64>> {
        let kappa = self.sensitivity(x)?;
        signed_contrast(&kappa, &self.signs, t_from, t_to)
    }

    /// Sensitivity coefficients for `x`.
    pub fn sensitivity(&self, x: &Tensor2) -> Result<Tensor2> {
        let (i, c, a) = self.disentangle(x)?;
        self.predict_sensitivity(&i, &c, &a)
    }

    /// Frozen-propensity inputs for the causal stage.
    pub fn causal_features(&self, x: &Tensor2, t: &Tensor2) -> Result<CausalFeatures> {
        self.check_x(x)?;
        self.check_t(t, x.rows())?;
        let (rep_i, rep_c, rep_a) = self.disentangle(x)?;
        let t_hat = self.predict_treatment(&rep_i, &rep_c)?;
        let (y_base, _) = self.predict_outcome(&rep_c, &rep_a)?;
        Ok(CausalFeatures {
            upsilon: Tensor2::hconcat(&[&rep_i, &rep_c, &rep_a])?,
            y_base,
            delta_t: t.sub(&t_hat)?,
        })
    }

    /// Column means of each factor head's first weight matrix, in shared-bottom space.
    pub fn rlo_vectors(&self) -> [Vec<f64>; 3] {
        let mean_cols = |net: &Mlp| {
            let w = &net.layers()[0].weight;
            let n = w.cols() as f64;
            (0..w.rows()).map(|r| w.row(r).iter().sum::<f64>() / n).collect()
        };
        [mean_cols(&self.head_i), mean_cols(&self.head_c), mean_cols(&self.head_a)]
    }

    pub fn rlo_penalty(&self) -> Result<f64> {
        let [wi, wc, wa] = self.rlo_vectors();
        losses::rlo_penalty(&wi, &wc, &wa)
    }

    fn nets(&self) -> [&Mlp; 7] {
        [
            &self.shared_bottom,
            &self.head_i,
            &self.head_c,
            &self.head_a,
            &self.f_t,
            &self.f_y,
            &self.f_k,
        ]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 7] {
        [
            &mut self.shared_bottom,
            &mut self.head_i,
            &mut self.head_c,
            &mut self.head_a,
            &mut self.f_t,
            &mut self.f_y,
            &mut self.f_k,
        ]
    }

    /// Networks updated when training `stage`.
    pub fn trainable_mut(&mut self, stage: Stage) -> Vec<&mut Mlp> {
        let [bottom, hi, hc, ha, ft, fy, fk] = self.nets_mut();
        match stage {
            Stage::Propensity => vec![bottom, hi, hc, ha, ft, fy],
            Stage::Causal => vec![fk],
            Stage::Joint => vec![bottom, hi, hc, ha, ft, fy, fk],
        }
    }

    pub fn zero_grad(&mut self) {
        for net in self.nets_mut() {
            net.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// All parameters, network by network in a fixed order.
    pub fn params_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(MtdmlError::dim("model set_params_flat", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for net in self.nets_mut() {
            let n = net.param_count();
            net.set_params_flat(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.grads_flat()).collect()
    }

    /// Parameters of the networks frozen during the causal stage.
    pub fn propensity_params(&self) -> Vec<f64> {
        self.nets()[..6].iter().flat_map(|n| n.params_flat()).collect()
    }

    /// Evaluates the stage objective on a batch and leaves its gradients in the
    /// networks' buffers (previous gradients are cleared first).
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor2,
        t: &Tensor2,
        y: &[f64],
        objective: &Objective,
        stage: Stage,
    ) -> Result<LossBreakdown> {
        self.check_x(x)?;
        self.check_t(t, x.rows())?;
        if y.len() != x.rows() {
            return Err(MtdmlError::dim("outcome length", x.rows(), y.len()));
        }
        if x.rows() == 0 {
            return Err(MtdmlError::Config("empty batch".into()));
        }
        if stage == Stage::Causal {
            let feats = self.causal_features(x, t)?;
            return self.causal_loss_and_grads(&feats, y, objective);
        }
        self.zero_grad();
        let (out, caches) = self.forward_cached(x, t)?;
        let w = &objective.weights;
        let use_rlo = self.config.disentangle;

        let (l_treat, g_that_treat) = losses::treatment_loss_and_grad(t, &out.t_hat)?;
        let (l_out, g_ybase_out) = objective.outcome_loss(y, &out.y_base)?;
        let (l_rlo, rlo_grads) = if use_rlo {
            let [wi, wc, wa] = self.rlo_vectors();
            let (v, g) = losses::rlo_penalty_and_grads(&wi, &wc, &wa)?;
            (v, Some(g))
        } else {
            (0.0, None)
        };

        let mut breakdown = LossBreakdown {
            treatment: l_treat,
            outcome: l_out,
            rlo: l_rlo,
            ..Default::default()
        };

        let mut g_that = g_that_treat;
        let mut g_ybase = g_ybase_out;
        let mut g_kappa: Option<Tensor2> = None;

        if stage == Stage::Joint {
            let (l_final, g_yfinal) = objective.outcome_loss(y, &out.y_final)?;
            let l_k = losses::k_reg(&out.kappa);
            breakdown.final_ = l_final;
            breakdown.k_reg = l_k;
            let mut gk = losses::k_reg_grad(&out.kappa).scale(w.lambda_k);
            for (i, &g) in g_yfinal.iter().enumerate() {
                if caches.clamped[i] {
                    continue;
                }
                g_ybase[i] += g;
                for k in 0..self.treatment_dim {
                    let s = self.signs[k];
                    let kv = out.kappa.get(i, k);
                    let dt = out.delta_t.get(i, k);
                    gk.set(i, k, gk.get(i, k) + g * s * dt);
                    // delta_t = t - t_hat
                    g_that.set(i, k, g_that.get(i, k) - g * s * kv);
                }
            }
            g_kappa = Some(gk);
        }

        breakdown.total = match stage {
            Stage::Propensity => losses::total_loss(l_treat, l_out, 0.0, l_rlo, 0.0, w)?,
            _ => losses::total_loss(l_treat, l_out, breakdown.final_, l_rlo, breakdown.k_reg, w)?,
        };

        // Exponential link: d exp(z)/dz = exp(z) unless clamped.
        let g_zy: Vec<f64> = g_ybase
            .iter()
            .zip(&out.y_base)
            .zip(&caches.y_raw)
            .map(|((g, yb), z)| if *z > MAX_LOG_OUTCOME { 0.0 } else { g * yb })
            .collect();
        let r = self.config.rep;
        let g_phi = self.f_y.backward(&caches.f_y, &Tensor2::column_vector(&g_zy))?;
        let g_omega = self.f_t.backward(&caches.f_t, &g_that)?;
        let mut phi_parts = g_phi.split_cols(&[r, r])?.into_iter();
        let mut omega_parts = g_omega.split_cols(&[r, r])?.into_iter();
        let mut g_ri = omega_parts.next().expect("two parts");
        let mut g_rc = omega_parts.next().expect("two parts").add(&phi_parts.next().expect("two parts"))?;
        let mut g_ra = phi_parts.next().expect("two parts");
        if let Some(gk) = g_kappa {
            let g_ups = self.f_k.backward(&caches.f_k, &gk)?;
            let mut parts = g_ups.split_cols(&[r, r, r])?.into_iter();
            g_ri = g_ri.add(&parts.next().expect("three parts"))?;
            g_rc = g_rc.add(&parts.next().expect("three parts"))?;
            g_ra = g_ra.add(&parts.next().expect("three parts"))?;
        }
        let g_h = if self.config.disentangle {
            let gi = self.head_i.backward(caches.head_i.as_ref().expect("disentangled"), &g_ri)?;
            let gc = self.head_c.backward(&caches.head_c, &g_rc)?;
            let ga = self.head_a.backward(caches.head_a.as_ref().expect("disentangled"), &g_ra)?;
            gi.add(&gc)?.add(&ga)?
        } else {
            let g_r = g_ri.add(&g_rc)?.add(&g_ra)?;
            self.head_c.backward(&caches.head_c, &g_r)?
        };
        self.shared_bottom.backward(&caches.bottom, &g_h)?;

        if let Some([gi, gc, ga]) = rlo_grads {
            for (net, g) in [(&mut self.head_i, gi), (&mut self.head_c, gc), (&mut self.head_a, ga)] {
                let layer = &mut net.layers_mut()[0];
                let cols = layer.weight.cols();
                let scale = w.lambda_rlo / cols as f64;
                let gw = layer.grad_weight.as_mut().expect("zeroed above");
                for (row, gv) in g.iter().enumerate() {
                    for v in gw.row_mut(row) {
                        *v += scale * gv;
                    }
                }
            }
        }
        check_breakdown(&breakdown)?;
        Ok(breakdown)
    }

    /// Causal-stage objective from precomputed frozen features; only the sensitivity
    /// network receives gradients.
    pub fn causal_loss_and_grads(
        &mut self,
        feats: &CausalFeatures,
        y: &[f64],
        objective: &Objective,
    ) -> Result<LossBreakdown> {
        if y.len() != feats.rows() {
            return Err(MtdmlError::dim("outcome length", feats.rows(), y.len()));
        }
        self.f_k.zero_grad();
        let (kappa, cache) = self.f_k.forward(&feats.upsilon)?;
        let (y_final, clamped) =
            monotonic_head_masked(&kappa, &feats.delta_t, &self.signs, &feats.y_base, self.config.y_floor)?;
        let (l_final, g_yfinal) = objective.outcome_loss(y, &y_final)?;
        let l_k = losses::k_reg(&kappa);
        let mut gk = losses::k_reg_grad(&kappa).scale(objective.weights.lambda_k);
        for (i, &g) in g_yfinal.iter().enumerate() {
            if clamped[i] {
                continue;
            }
            for k in 0..self.treatment_dim {
                let v = gk.get(i, k) + g * self.signs[k] * feats.delta_t.get(i, k);
                gk.set(i, k, v);
            }
        }
        self.f_k.backward(&cache, &gk)?;
        let breakdown = LossBreakdown {
            final_: l_final,
            k_reg: l_k,
            total: losses::total_loss(0.0, 0.0, l_final, 0.0, l_k, &objective.weights)?,
            ..Default::default()
        };
        check_breakdown(&breakdown)?;
        Ok(breakdown)
    }

    fn forward_cached(&self, x: &Tensor2, t: &Tensor2) -> Result<(ForwardOutput, Caches)> {
        let (h, bottom) = self.shared_bottom.forward(x)?;
        let (rep_i, rep_c, rep_a, head_i, head_c, head_a) = if self.config.disentangle {
            let (ri, ci) = self.head_i.forward(&h)?;
            let (rc, cc) = self.head_c.forward(&h)?;
            let (ra, ca) = self.head_a.forward(&h)?;
            (ri, rc, ra, Some(ci), cc, Some(ca))
        } else {
            let (r, cc) = self.head_c.forward(&h)?;
            (r.clone(), r.clone(), r, None, cc, None)
        };
        let (t_hat, f_t) = self.f_t.forward(&Tensor2::hconcat(&[&rep_i, &rep_c])?)?;
        let (z_y, f_y) = self.f_y.forward(&Tensor2::hconcat(&[&rep_c, &rep_a])?)?;
        let (y_base, exp_clamped) = exp_link(z_y.as_slice());
        let (kappa, f_k) = self.f_k.forward(&Tensor2::hconcat(&[&rep_i, &rep_c, &rep_a])?)?;
        let delta_t = t.sub(&t_hat)?;
        let (y_final, clamped) =
            monotonic_head_masked(&kappa, &delta_t, &self.signs, &y_base, self.config.y_floor)?;
        Ok((
            ForwardOutput {
                rep_i,
                rep_c,
                rep_a,
                t_hat,
                y_base,
                kappa,
                delta_t,
                y_final,
                exp_clamped,
            },
            Caches {
                bottom,
                head_i,
                head_c,
                head_a,
                f_t,
                f_y,
                f_k,
                y_raw: z_y.into_vec(),
                clamped,
            },
        ))
    }
}

fn check_breakdown(b: &LossBreakdown) -> Result<()> {
    for (name, v) in [
        ("treatment", b.treatment),
        ("outcome", b.outcome),
        ("final", b.final_),
        ("rlo", b.rlo),
        ("k_reg", b.k_reg),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(MtdmlError::numeric(format!("{name} loss")));
        }
    }
    Ok(())
}

fn exp_link(z: &[f64]) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let out = z
        .iter()
        .map(|&v| {
            if v > MAX_LOG_OUTCOME {
                clamped += 1;
                MAX_LOG_OUTCOME.exp()
            } else {
                v.exp()
            }
        })
        .collect();
    (out, clamped)
}

/// `Σ_k kappa_ik · sign_k · (t_to − t_from)_k` per row.
pub fn signed_contrast(kappa: &Tensor2, signs: &[f64], t_from: &[f64], t_to: &[f64]) -> Result<Vec<f64>> {
    let k_t = kappa.cols();
    if t_from.len() != k_t || t_to.len() != k_t {
        return Err(MtdmlError::dim("treatment contrast length", k_t, t_from.len().max(t_to.len())));
    }
    if signs.len() != k_t {
        return Err(MtdmlError::dim("monotone signs", k_t, signs.len()));
    }
    let step: Vec<f64> = t_to
        .iter()
        .zip(t_from)
        .zip(signs)
        .map(|((b, a), s)| s * (b - a))
        .collect();
    Ok((0..kappa.rows())
        .map(|i| kappa.row(i).iter().zip(&step).map(|(k, d)| k * d).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{finite_diff_grad, relative_error};

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 6,
            rep: 3,
            head_hidden: 5,
            ..Default::default()
        }
    }

    fn model(seed: u64, config: ModelConfig) -> MtdmlModel {
        MtdmlModel::new(4, 2, config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(seed: u64, n: usize) -> (Tensor2, Tensor2, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor2::from_fn(n, 4, |_, _| rng.random_range(-1.5..1.5));
        let t = Tensor2::from_fn(n, 2, |_, _| rng.random_range(-1.0..2.0));
        let y = (0..n)
            .map(|i| if i % 3 == 0 { 0.0 } else { rng.random_range(0.1..4.0) })
            .collect();
        (x, t, y)
    }

    fn objective(outcome: OutcomeLoss) -> Objective {
        Objective {
            weights: LossWeights {
                lambda_rlo: 0.3,
                lambda_k: 0.05,
                rho: 1.9,
            },
            outcome,
        }
    }

    #[test]
    fn monotonic_head_examples() {
        let kappa = Tensor2::from_rows(&[vec![0.5, 0.2]]).unwrap();
        let dt = Tensor2::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let y = monotonic_head(&kappa, &dt, &[1.0, 1.0], &[1.0], 1e-6).unwrap();
        assert!((y[0] - 1.8).abs() < 1e-15);

        let zero = Tensor2::zeros(1, 2);
        assert_eq!(monotonic_head(&kappa, &zero, &[1.0, 1.0], &[0.7], 1e-6).unwrap(), vec![0.7]);

        let k1 = Tensor2::from_rows(&[vec![1.0]]).unwrap();
        let d1 = Tensor2::from_rows(&[vec![-10.0]]).unwrap();
        assert_eq!(monotonic_head(&k1, &d1, &[1.0], &[0.5], 1e-6).unwrap(), vec![1e-6]);
    }

    #[test]
    fn zero_input_gives_zero_embeddings() {
        let mut m = model(1, small_config());
        for net in [&mut m.shared_bottom, &mut m.head_i, &mut m.head_c, &mut m.head_a] {
            for l in net.layers_mut() {
                l.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let (i, c, a) = m.disentangle(&Tensor2::zeros(3, 4)).unwrap();
        for rep in [i, c, a] {
            assert!(rep.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn disentangle_matches_hand_composition() {
        let m = model(2, small_config());
        let x = Tensor2::from_rows(&[vec![0.2, -0.4, 1.0, 0.5]]).unwrap();
        let (_, rep_c, _) = m.disentangle(&x).unwrap();
        let relu = |v: f64| v.max(0.0);
        let b = &m.shared_bottom.layers()[0];
        let h: Vec<f64> = (0..6)
            .map(|j| relu((0..4).map(|i| x.get(0, i) * b.weight.get(i, j)).sum::<f64>() + b.bias[j]))
            .collect();
        let hc = &m.head_c.layers()[0];
        for j in 0..3 {
            let v = relu((0..6).map(|i| h[i] * hc.weight.get(i, j)).sum::<f64>() + hc.bias[j]);
            assert!((rep_c.get(0, j) - v).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let m = model(3, small_config());
        let x = Tensor2::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.4]; 3]).unwrap();
        let t = Tensor2::from_rows(&vec![vec![1.0, 0.5]; 3]).unwrap();
        let out = m.forward(&x, &t).unwrap();
        assert_eq!(out.t_hat.row(0), out.t_hat.row(2));
        assert_eq!(out.y_final[0], out.y_final[1]);
    }

    #[test]
    fn row_permutation_is_equivariant() {
        let m = model(4, small_config());
        let (x, t, _) = batch(4, 5);
        let perm = [3, 0, 4, 1, 2];
        let out = m.forward(&x, &t).unwrap();
        let outp = m.forward(&x.select_rows(&perm), &t.select_rows(&perm)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(outp.t_hat.row(new), out.t_hat.row(old));
            assert_eq!(outp.y_final[new], out.y_final[old]);
        }
    }

    #[test]
    fn zero_treatment_net_emits_bias() {
        let mut m = model(5, small_config());
        for l in m.f_t.layers_mut() {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        }
        m.f_t.layers_mut()[1].bias = vec![2.5, -1.0];
        let (x, _, _) = batch(5, 4);
        let (i, c, _) = m.disentangle(&x).unwrap();
        let t_hat = m.predict_treatment(&i, &c).unwrap();
        for r in 0..4 {
            assert_eq!(t_hat.row(r), &[2.5, -1.0]);
        }
    }

    #[test]
    fn outcome_link_and_sensitivity_tail_values() {
        let mut m = model(6, small_config());
        for net in [&mut m.f_y, &mut m.f_k] {
            for l in net.layers_mut() {
                l.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
                l.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let (x, _, _) = batch(6, 2);
        let (i, c, a) = m.disentangle(&x).unwrap();
        assert_eq!(m.predict_outcome(&c, &a).unwrap(), (vec![1.0, 1.0], 0));
        let k = m.predict_sensitivity(&i, &c, &a).unwrap();
        assert!(k.as_slice().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));

        m.f_y.layers_mut()[1].bias[0] = std::f64::consts::LN_2;
        assert!((m.predict_outcome(&c, &a).unwrap().0[0] - 2.0).abs() < 1e-15);
        m.f_y.layers_mut()[1].bias[0] = 45.0;
        let (yb, clamped) = m.predict_outcome(&c, &a).unwrap();
        assert_eq!(clamped, 2);
        assert_eq!(yb[0], MAX_LOG_OUTCOME.exp());

        m.f_k.layers_mut()[1].bias = vec![-50.0, -50.0];
        let k = m.predict_sensitivity(&i, &c, &a).unwrap();
        assert!(k.as_slice().iter().all(|&v| (0.0..=1e-20).contains(&v)));
    }

    #[test]
    fn uplift_is_linear_and_observed_treatment_free() {
        let m = model(7, small_config());
        let (x, _, _) = batch(7, 6);
        let a = [0.0, 1.0];
        let b = [0.7, 1.5];
        let c = [2.0, -0.5];
        assert!(m.uplift(&x, &a, &a).unwrap().iter().all(|&v| v == 0.0));
        let ac = m.uplift(&x, &a, &c).unwrap();
        let ab = m.uplift(&x, &a, &b).unwrap();
        let bc = m.uplift(&x, &b, &c).unwrap();
        for i in 0..6 {
            assert!((ac[i] - ab[i] - bc[i]).abs() < 1e-12);
        }
        let double = m.uplift(&x, &[0.0, 0.0], &[2.0, 2.0]).unwrap();
        let single = m.uplift(&x, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        for (d, s) in double.iter().zip(&single) {
            assert_eq!(*d, 2.0 * s);
        }
        assert!(m.uplift(&x, &[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn negative_signs_flip_direction() {
        let cfg = ModelConfig {
            signs: Some(vec![1, -1]),
            ..small_config()
        };
        let m = model(8, cfg);
        let (x, _, _) = batch(8, 4);
        let up = m.uplift(&x, &[0.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(up.iter().all(|&v| v <= 0.0));
        assert!(MtdmlModel::new(4, 2, ModelConfig { signs: Some(vec![1, 0]), ..small_config() }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn joint_without_regularizers_is_sum_of_data_losses() {
        let mut m = model(9, small_config());
        let (x, t, y) = batch(9, 6);
        let obj = Objective {
            weights: LossWeights {
                lambda_rlo: 0.0,
                lambda_k: 0.0,
                rho: 1.9,
            },
            outcome: OutcomeLoss::Tweedie,
        };
        let b = m.loss_and_grads(&x, &t, &y, &obj, Stage::Joint).unwrap();
        assert!((b.total - (b.treatment + b.outcome + b.final_)).abs() < 1e-12);
    }

    fn check_stage_gradients(seed: u64, stage: Stage, outcome: OutcomeLoss, disentangle: bool) {
        let cfg = ModelConfig {
            disentangle,
            ..small_config()
        };
        let mut m = model(seed, cfg);
        let (x, t, y) = batch(seed + 100, 6);
        let obj = objective(outcome);
        m.loss_and_grads(&x, &t, &y, &obj, stage).unwrap();
        let analytic = m.grads_flat();
        let theta = m.params_flat();
        let mut probe = m.clone();
        let numeric = finite_diff_grad(
            |p| {
                probe.set_params_flat(p).unwrap();
                probe.loss_and_grads(&x, &t, &y, &obj, stage).unwrap().total
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let frozen = m.propensity_params().len();
        for (idx, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            // Causal-stage gradients only exist for the sensitivity network.
            if stage == Stage::Causal && idx < frozen {
                assert_eq!(*a, 0.0);
                continue;
            }
            assert!(
                relative_error(*a, *n, 1e-5) < 1e-4,
                "{stage:?} param {idx}: analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_each_stage() {
        for stage in [Stage::Propensity, Stage::Causal, Stage::Joint] {
            check_stage_gradients(11, stage, OutcomeLoss::Tweedie, true);
        }
        check_stage_gradients(12, Stage::Joint, OutcomeLoss::Squared, true);
        check_stage_gradients(13, Stage::Joint, OutcomeLoss::Tweedie, false);
    }

    #[test]
    fn rlo_is_scale_invariant_per_head() {
        let mut m = model(14, small_config());
        let before = m.rlo_penalty().unwrap();
        for l in m.head_a.layers_mut() {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w *= 3.5);
        }
        assert!((m.rlo_penalty().unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip() {
        let m = model(15, small_config());
        let back: MtdmlModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        back.validate().unwrap();
        assert_eq!(back.params_flat(), m.params_flat());
    }
}
