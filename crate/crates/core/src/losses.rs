//! Adaptation objective: entropy minimization plus an energy-margin
//! regularizer, with closed-form gradients with respect to logits.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("row {row} is not a probability distribution ({reason})")]
    NotDistribution { row: usize, reason: String },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ent: f64,
    pub lambda_eng: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ent: 2.0,
            lambda_eng: 0.01,
            m_in: -15.0,
            m_out: -7.0,
            tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_ent >= 0.0 && self.lambda_eng >= 0.0) {
            return Err(LossError::Weights("loss weights must be non-negative".into()));
        }
        if !(self.m_in < self.m_out) {
            return Err(LossError::Weights(format!(
                "m_in ({}) must be below m_out ({})",
                self.m_in, self.m_out
            )));
        }
        if !(self.tau > 0.0) {
            return Err(LossError::Weights("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `log Σ exp(v)` with max-shift.
pub fn logsumexp<T: Real>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let lse = logsumexp(v);
    v.iter().map(|&x| (x - lse).exp()).collect()
}

pub fn log_softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let lse = logsumexp(row.as_slice().expect("standard layout"));
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    log_softmax_rows(logits).mapv(T::exp)
}

/// Value of a scalar loss together with its gradient.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Array2<T>,
}

/// Mean Shannon entropy of probability rows, with `0·log 0 = 0`.
pub fn entropy_from_probs<T: Real>(probs: ArrayView2<T>) -> Result<T, LossError> {
    let tol = T::of(1e-5);
    let n = probs.nrows();
    if n == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
        let mut sum = T::zero();
        for &p in row {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(LossError::NotDistribution {
                    row: i,
                    reason: format!("entry {p} outside [0, 1]"),
                });
            }
            sum += p;
            if p > T::zero() {
                total -= p * p.ln();
            }
        }
        if (sum - T::one()).abs() > tol {
            return Err(LossError::NotDistribution {
                row: i,
                reason: format!("sums to {sum}"),
            });
        }
    }
    Ok(total / T::of(n as f64))
}

/// Mean softmax entropy of `logits` rows and its logit gradient
/// `-p_j (log p_j + H) / N`.
pub fn entropy_loss<T: Real>(logits: &Array2<T>) -> LossGrad<T> {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    if n == 0 {
        return LossGrad {
            value: T::zero(),
            grad,
        };
    }
    let inv_n = T::one() / T::of(n as f64);
    let logp = log_softmax_rows(logits);
    let mut total = T::zero();
    for (lp, mut g) in logp.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))) {
        let h: T = -lp.iter().map(|&l| l.exp() * l).sum::<T>();
        total += h;
        for (gj, &l) in g.iter_mut().zip(lp) {
            *gj = -l.exp() * (l + h) * inv_n;
        }
    }
    LossGrad {
        value: total * inv_n,
        grad,
    }
}

/// `E = -log Σ_k exp(f_k / τ²)`.
pub fn energy_score<T: Real>(logits: &[T], tau: T) -> T {
    let t2 = tau * tau;
    let scaled: Vec<T> = logits.iter().map(|&f| f / t2).collect();
    -logsumexp(&scaled)
}

/// `∂E/∂f_k = -softmax(f/τ²)_k / τ²`.
pub fn energy_score_grad<T: Real>(logits: &[T], tau: T) -> Vec<T> {
    let t2 = tau * tau;
    let scaled: Vec<T> = logits.iter().map(|&f| f / t2).collect();
    softmax(&scaled).into_iter().map(|p| -p / t2).collect()
}

#[derive(Clone, Debug)]
pub struct EnergyBounded<T> {
    pub value: T,
    pub d_orig: Vec<T>,
    pub d_aug: Vec<T>,
}

/// `mean(max(0, E(x) - m_in)²) + mean(max(0, m_out - E(x'))²)`; an empty
/// side contributes nothing.
pub fn energy_bounded_loss<T: Real>(e_orig: &[T], e_aug: &[T], m_in: T, m_out: T) -> EnergyBounded<T> {
    let two = T::of(2.0);
    let mut value = T::zero();
    let mut d_orig = vec![T::zero(); e_orig.len()];
    let mut d_aug = vec![T::zero(); e_aug.len()];
    if !e_orig.is_empty() {
        let inv = T::one() / T::of(e_orig.len() as f64);
        for (d, &e) in d_orig.iter_mut().zip(e_orig) {
            let hinge = (e - m_in).max(T::zero());
            value += hinge * hinge * inv;
            *d = two * hinge * inv;
        }
    }
    if !e_aug.is_empty() {
        let inv = T::one() / T::of(e_aug.len() as f64);
        for (d, &e) in d_aug.iter_mut().zip(e_aug) {
            let hinge = (m_out - e).max(T::zero());
            value += hinge * hinge * inv;
            *d = -two * hinge * inv;
        }
    }
    EnergyBounded {
        value,
        d_orig,
        d_aug,
    }
}

#[derive(Clone, Debug)]
pub struct TotalLoss<T> {
    pub total: T,
    pub entropy: T,
    pub energy: T,
    pub grad_mem: Array2<T>,
    pub grad_aug: Array2<T>,
}

/// `λ_ent·L_ent(mem) + λ_eng·L_energy(mem, aug)` and gradients for both
/// logit batches.
pub fn total_loss<T: Real>(
    logits_mem: &Array2<T>,
    logits_aug: &Array2<T>,
    weights: &LossWeights,
) -> TotalLoss<T> {
    let tau = T::of(weights.tau);
    let lam_ent = T::of(weights.lambda_ent);
    let lam_eng = T::of(weights.lambda_eng);
    let ent = entropy_loss(logits_mem);
    let rows = |a: &Array2<T>| -> Vec<Vec<T>> { a.rows().into_iter().map(|r| r.to_vec()).collect() };
    let mem_rows = rows(logits_mem);
    let aug_rows = rows(logits_aug);
    let e_mem: Vec<T> = mem_rows.iter().map(|r| energy_score(r, tau)).collect();
    let e_aug: Vec<T> = aug_rows.iter().map(|r| energy_score(r, tau)).collect();
    let eb = energy_bounded_loss(&e_mem, &e_aug, T::of(weights.m_in), T::of(weights.m_out));

    let mut grad_mem = ent.grad.mapv(|g| g * lam_ent);
    for ((mut g, row), &de) in grad_mem.axis_iter_mut(Axis(0)).zip(&mem_rows).zip(&eb.d_orig) {
        for (gj, dj) in g.iter_mut().zip(energy_score_grad(row, tau)) {
            *gj += lam_eng * de * dj;
        }
    }
    let mut grad_aug = Array2::zeros(logits_aug.raw_dim());
    for ((mut g, row), &de) in grad_aug.axis_iter_mut(Axis(0)).zip(&aug_rows).zip(&eb.d_aug) {
        for (gj, dj) in g.iter_mut().zip(energy_score_grad(row, tau)) {
            *gj = lam_eng * de * dj;
        }
    }
    TotalLoss {
        total: lam_ent * ent.value + lam_eng * eb.value,
        entropy: ent.value,
        energy: eb.value,
        grad_mem,
        grad_aug,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn entropy_examples() {
        let h = entropy_from_probs(array![[0.5f64, 0.5]].view()).unwrap();
        assert!((h - 0.693147).abs() < 1e-6);
        assert_eq!(entropy_from_probs(array![[1.0f64, 0.0]].view()).unwrap(), 0.0);
        let h = entropy_from_probs(array![[0.5f64, 0.5], [1.0, 0.0]].view()).unwrap();
        assert!((h - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        assert!(entropy_from_probs(array![[0.7f64, 0.7]].view()).is_err());
        assert!(entropy_from_probs(array![[1.2f64, -0.2]].view()).is_err());
    }

    #[test]
    fn energy_examples() {
        assert!((energy_score(&[0.0f64, 0.0], 1.0) + LN2).abs() < 1e-12);
        // Frozen from direct evaluation: -ln(e^2 + 1).
        assert!((energy_score(&[2.0f64, 0.0], 1.0) - -2.126928).abs() < 1e-6);
        assert!((energy_score(&[2.0f64, 0.0], 1e4) + LN2).abs() < 1e-6);
    }

    #[test]
    fn energy_bounded_examples() {
        let v = energy_bounded_loss(&[-20.0f64], &[-3.0], -15.0, -7.0).value;
        assert_eq!(v, 0.0);
        assert_eq!(energy_bounded_loss(&[-10.0f64], &[], -15.0, -7.0).value, 25.0);
        assert_eq!(energy_bounded_loss(&[], &[-9.0f64], -15.0, -7.0).value, 4.0);
    }

    #[test]
    fn total_loss_weighting() {
        // λ_eng = 0 leaves exactly λ_ent·L_ent.
        let mem = array![[0.3f64, -1.2], [2.0, 0.5]];
        let aug = array![[0.1f64, 0.0], [-0.4, 0.9]];
        let w = LossWeights {
            lambda_eng: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mem, &aug, &w);
        assert_eq!(t.total, 2.0 * entropy_loss(&mem).value);
        assert!(t.grad_aug.iter().all(|&g| g == 0.0));
        // 2·0.5 + 0.01·25 = 1.25 for the stated component values.
        let lw = LossWeights::default();
        assert!((lw.lambda_ent * 0.5 + lw.lambda_eng * 25.0 - 1.25).abs() < 1e-12);
    }

    #[test]
    fn weights_validate_margin_order() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            m_in: -5.0,
            m_out: -7.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_classes(row in proptest::collection::vec(-30.0f64..30.0, 2..6)) {
            let c = row.len();
            let logits = Array2::from_shape_vec((1, c), row).unwrap();
            let h = entropy_loss(&logits).value;
            prop_assert!(h >= -1e-12 && h <= (c as f64).ln() + 1e-12);
        }

        #[test]
        fn energy_is_translation_covariant(row in proptest::collection::vec(-20.0f64..20.0, 2..5), a in -50.0f64..50.0) {
            let shifted: Vec<f64> = row.iter().map(|v| v + a).collect();
            let d = energy_score(&shifted, 1.0) - energy_score(&row, 1.0);
            prop_assert!((d + a).abs() < 1e-9);
        }

        #[test]
        fn energy_bounded_is_zero_iff_margins_hold(
            e_orig in proptest::collection::vec(-30.0f64..0.0, 0..5),
            e_aug in proptest::collection::vec(-30.0f64..0.0, 0..5),
        ) {
            let v = energy_bounded_loss(&e_orig, &e_aug, -15.0, -7.0).value;
            let satisfied = e_orig.iter().all(|&e| e <= -15.0) && e_aug.iter().all(|&e| e >= -7.0);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, satisfied);
        }
    }
}
