//! Scalar training objectives and their gradients.
//!
//! The Tweedie objective is the negative log-likelihood kernel for a Tweedie
//! distribution with power `1 < rho < 2`, so it is minimized at `y_hat == y`.

use serde::{Deserialize, Serialize};

use crate::error::{MtdmlError, Result};
use crate::nn::Tensor2;

/// Regularizer weights and the Tweedie power used by the outcome losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rlo: f64,
    /// Tweedie curvature in kappa scales like `y_hat^(-rho)`, so values near
    /// `1e-2` already shrink kappa noticeably once outcomes are in the single digits.
    pub lambda_k: f64,
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rlo: 0.1,
            lambda_k: 1e-4,
            rho: 1.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if !(self.lambda_rlo >= 0.0) || !self.lambda_rlo.is_finite() {
            return Err(MtdmlError::Config(format!("lambda_rlo must be >= 0, got {}", self.lambda_rlo)));
        }
        if !(self.lambda_k >= 0.0) || !self.lambda_k.is_finite() {
            return Err(MtdmlError::Config(format!("lambda_k must be >= 0, got {}", self.lambda_k)));
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 1.0 && rho < 2.0 {
        Ok(())
    } else {
        Err(MtdmlError::Config(format!("Tweedie power must lie in (1, 2), got {rho}")))
    }
}

/// Mean over samples of the summed squared error across treatment dimensions.
pub fn treatment_loss(t: &Tensor2, t_hat: &Tensor2) -> Result<f64> {
    Ok(treatment_loss_and_grad(t, t_hat)?.0)
}

/// Loss plus its gradient with respect to `t_hat`.
pub fn treatment_loss_and_grad(t: &Tensor2, t_hat: &Tensor2) -> Result<(f64, Tensor2)> {
    if t.shape() != t_hat.shape() {
        return Err(MtdmlError::dim(
            "treatment_loss",
            format!("{:?}", t.shape()),
            format!("{:?}", t_hat.shape()),
        ));
    }
    let n = t.rows().max(1) as f64;
    let resid = t_hat.sub(t)?;
    let loss = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / n;
    Ok((loss, resid.scale(2.0 / n)))
}

/// Mean Tweedie negative log-likelihood kernel and its per-sample gradient in `y_hat`.
///
/// The gradient is already divided by `N`, i.e. it is the gradient of the returned mean.
pub fn tweedie_nll(y: &[f64], y_hat: &[f64], rho: f64) -> Result<(f64, Vec<f64>)> {
    check_rho(rho)?;
    if y.len() != y_hat.len() {
        return Err(MtdmlError::dim("tweedie_nll", y.len(), y_hat.len()));
    }
    if let Some((i, v)) = y_hat.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(MtdmlError::Domain(format!("y_hat[{i}] = {v} is not strictly positive")));
    }
    if let Some((i, v)) = y.iter().enumerate().find(|(_, &v)| !(v >= 0.0)) {
        return Err(MtdmlError::Domain(format!("y[{i}] = {v} is negative")));
    }
    let n = y.len().max(1) as f64;
    let a = 1.0 - rho;
    let b = 2.0 - rho;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&yi, &mu) in y.iter().zip(y_hat) {
        let mu_a = mu.powf(a);
        let mu_b = mu_a * mu;
        total += -yi * mu_a / a + mu_b / b;
        grad.push((mu_a - yi * mu_a / mu) / n);
    }
    Ok((total / n, grad))
}

/// Mean squared error and its gradient; the non-Tweedie outcome objective.
pub fn squared_error(y: &[f64], y_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y.len() != y_hat.len() {
        return Err(MtdmlError::dim("squared_error", y.len(), y_hat.len()));
    }
    let n = y.len().max(1) as f64;
    let loss = y.iter().zip(y_hat).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
    let grad = y.iter().zip(y_hat).map(|(a, b)| 2.0 * (b - a) / n).collect();
    Ok((loss, grad))
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine_and_grads(u, v)?.0)
}

/// Cosine similarity with gradients with respect to both arguments.
pub fn cosine_and_grads(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(MtdmlError::dim("cosine", u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(MtdmlError::Degenerate("cosine of a zero-norm vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    let du = u.iter().zip(v).map(|(a, b)| b / (nu * nv) - c * a / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a / (nu * nv) - c * b / (nv * nv)).collect();
    Ok((c.clamp(-1.0, 1.0), du, dv))
}

pub fn rlo_penalty(w_i: &[f64], w_c: &[f64], w_a: &[f64]) -> Result<f64> {
    Ok(rlo_penalty_and_grads(w_i, w_c, w_a)?.0)
}

/// Sum of the three pairwise cosines and the gradient for each input vector.
pub fn rlo_penalty_and_grads(
    w_i: &[f64],
    w_c: &[f64],
    w_a: &[f64],
) -> Result<(f64, [Vec<f64>; 3])> {
    let (ic, d_i1, d_c1) = cosine_and_grads(w_i, w_c)?;
    let (ca, d_c2, d_a1) = cosine_and_grads(w_c, w_a)?;
    let (ai, d_a2, d_i2) = cosine_and_grads(w_a, w_i)?;
    let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>();
    Ok((ic + ca + ai, [add(d_i1, d_i2), add(d_c1, d_c2), add(d_a1, d_a2)]))
}

/// Mean squared norm of the per-sample sensitivity rows.
pub fn k_reg(kappa: &Tensor2) -> f64 {
    let n = kappa.rows().max(1) as f64;
    kappa.as_slice().iter().map(|v| v * v).sum::<f64>() / n
}

pub fn k_reg_grad(kappa: &Tensor2) -> Tensor2 {
    let n = kappa.rows().max(1) as f64;
    kappa.scale(2.0 / n)
}

/// Weighted sum of the five objective terms.
pub fn total_loss(
    l_treat: f64,
    l_out: f64,
    l_final: f64,
    l_rlo: f64,
    l_kreg: f64,
    w: &LossWeights,
) -> Result<f64> {
    for (name, v) in [
        ("treatment", l_treat),
        ("outcome", l_out),
        ("final", l_final),
        ("rlo", l_rlo),
        ("k_reg", l_kreg),
    ] {
        if !v.is_finite() {
            return Err(MtdmlError::numeric(format!("{name} loss")));
        }
    }
    Ok(l_treat + l_out + l_final + w.lambda_rlo * l_rlo + w.lambda_k * l_kreg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad;

    #[test]
    fn treatment_loss_examples() {
        let t = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(treatment_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(treatment_loss(&t, &Tensor2::zeros(1, 2)).unwrap(), 5.0);
        let big = Tensor2::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let scaled = big.scale(3.0);
        let zero = Tensor2::zeros(2, 2);
        let base = treatment_loss(&big, &zero).unwrap();
        assert!((treatment_loss(&scaled, &zero).unwrap() - 9.0 * base).abs() < 1e-12);
        assert!(treatment_loss(&t, &zero).is_err());
    }

    #[test]
    fn tweedie_hand_values() {
        let (l0, _) = tweedie_nll(&[0.0], &[1.0], 1.9).unwrap();
        assert!((l0 - 10.0).abs() < 1e-9);
        let (l1, g1) = tweedie_nll(&[1.0], &[1.0], 1.9).unwrap();
        assert!((l1 - (1.0 / 0.9 + 10.0)).abs() < 1e-9);
        assert!(g1[0].abs() < 1e-15);
    }

    #[test]
    fn tweedie_stationary_at_truth() {
        for y in [0.3, 1.0, 2.5, 40.0] {
            let (_, g) = tweedie_nll(&[y], &[y], 1.5).unwrap();
            assert!(g[0].abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn tweedie_rejects_bad_inputs() {
        assert!(matches!(tweedie_nll(&[1.0], &[0.0], 1.9), Err(MtdmlError::Domain(_))));
        assert!(matches!(tweedie_nll(&[1.0], &[1.0], 2.0), Err(MtdmlError::Config(_))));
        assert!(matches!(tweedie_nll(&[1.0], &[1.0], 1.0), Err(MtdmlError::Config(_))));
        assert!(tweedie_nll(&[1.0, 2.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn tweedie_gradient_matches_finite_differences() {
        for y in [0.0, 0.5, 3.0] {
            for mu in [0.1, 1.0, 10.0] {
                let (_, g) = tweedie_nll(&[y], &[mu], 1.9).unwrap();
                let fd = finite_diff_grad(|p| tweedie_nll(&[y], p, 1.9).unwrap().0, &[mu], 1e-6 * mu)
                    .unwrap();
                let rel = (g[0] - fd[0]).abs() / g[0].abs().max(1e-12);
                assert!(rel < 1e-6, "y={y} mu={mu}: {} vs {}", g[0], fd[0]);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(MtdmlError::Degenerate(_))));
    }

    #[test]
    fn rlo_examples() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        assert_eq!(rlo_penalty(&e(0), &e(1), &e(2)).unwrap(), 0.0);
        let same = [0.3, -1.0, 2.0];
        assert!((rlo_penalty(&same, &same, &same).unwrap() - 3.0).abs() < 1e-12);
        let r = rlo_penalty(&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn rlo_gradient_matches_finite_differences() {
        let theta = [0.3, -0.2, 0.9, 1.1, 0.4, -0.5, -0.7, 0.2, 0.6];
        let f = |p: &[f64]| rlo_penalty(&p[0..3], &p[3..6], &p[6..9]).unwrap();
        let (_, grads) = rlo_penalty_and_grads(&theta[0..3], &theta[3..6], &theta[6..9]).unwrap();
        let analytic: Vec<f64> = grads.concat();
        let fd = finite_diff_grad(f, &theta, 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn k_reg_examples() {
        assert_eq!(k_reg(&Tensor2::zeros(3, 2)), 0.0);
        let k = Tensor2::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(k_reg(&k), 3.0);
        assert!((k_reg(&k.scale(-2.0)) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            lambda_rlo: 0.1,
            lambda_k: 0.01,
            rho: 1.9,
        };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!((total_loss(1.0, 2.0, 3.0, 4.0, 5.0, &w).unwrap() - 6.45).abs() < 1e-12);
        let zero = LossWeights {
            lambda_rlo: 0.0,
            lambda_k: 0.0,
            ..w
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, 5.0, &zero).unwrap(), 6.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 0.0, 0.0, &w),
            Err(MtdmlError::Numeric { .. })
        ));
    }

    #[test]
    fn default_weights_validate() {
        LossWeights::default().validate().unwrap();
        assert!(LossWeights { lambda_k: -1.0, ..Default::default() }.validate().is_err());
    }
}
