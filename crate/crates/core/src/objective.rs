//! The normalized multi-task loss.
//!
//! ```text
//! total = λ1 · L_audited / ‖L_audited‖ + λ2 · L_mint / ‖L_mint‖ + c · Σ w²
//! ```
//!
//! Each `‖·‖` is a running mean of the loss magnitude kept by a
//! [`LossNormalizer`]. Its value is read before differentiation and treated
//! as a constant, so the gradient of a normalized term is the raw gradient
//! scaled by `λ / ema`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::nets::Logits;
use crate::tensor::Real;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub l2_coeff: f64,
}

impl LossWeights {
    /// `λ2/λ1 = 10` with an L2 coefficient of `1e-4`.
    pub fn small_data() -> Self {
        Self { lambda1: 1.0, lambda2: 10.0, l2_coeff: 1e-4 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("l2_coeff", self.l2_coeff)] {
            if !v.is_finite() {
                return Err(Error::config(format!("weights.{name}"), "must be finite"));
            }
        }
        if self.lambda1 <= 0.0 {
            return Err(Error::config("weights.lambda1", "must be positive"));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::config("weights.lambda2", "must be nonnegative"));
        }
        if self.l2_coeff < 0.0 {
            return Err(Error::config("weights.l2_coeff", "must be nonnegative"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::small_data()
    }
}

/// Running mean of `|loss|`, floored away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossNormalizer {
    pub ema_abs: f64,
    pub momentum: f64,
    pub floor: f64,
    pub initialized: bool,
}

impl LossNormalizer {
    pub fn new(momentum: f64) -> Self {
        Self { ema_abs: 1.0, momentum, floor: 1e-8, initialized: false }
    }

    pub fn value(&self) -> f64 {
        self.ema_abs
    }
}

impl Default for LossNormalizer {
    fn default() -> Self {
        Self::new(0.99)
    }
}

pub fn update_normalizer(norm: LossNormalizer, raw: f64) -> Result<LossNormalizer> {
    if !raw.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize non-finite loss {raw}")));
    }
    let ema = if norm.initialized { norm.momentum * norm.ema_abs + (1.0 - norm.momentum) * raw.abs() } else { raw.abs() };
    Ok(LossNormalizer { ema_abs: ema.max(norm.floor), initialized: true, ..norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLossOutput {
    pub total: f64,
    pub audited_raw: f64,
    pub mint_raw: f64,
    pub audited_normed: f64,
    pub mint_normed: f64,
    pub reg: f64,
}

/// Multipliers applied to each raw gradient by [`combine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScales {
    pub audited: f64,
    pub mint: f64,
    /// Coefficient on `w` in the regularizer gradient (`2c`).
    pub l2: f64,
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Logits<T>, labels: &[usize]) -> Result<(T, Logits<T>)> {
    let n = logits.batch();
    let k = logits.num_classes;
    if n == 0 {
        return Err(Error::Contract("audited loss needs at least one member sample".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} logit rows", labels.len())));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("class label {y} out of range for {k} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - m).exp()).sum();
        let log_z = m + sum.ln();
        total = total + (log_z - row[y]);
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            let t = if c == y { T::one() } else { T::zero() };
            grad[i * k + c] = (p - t) * inv_n;
        }
    }
    Ok((total * inv_n, Logits { num_classes: k, values: grad }))
}

/// Mean softmax cross-entropy over member samples.
pub fn audited_loss<T: Real>(logits: &Logits<T>, labels: &[usize]) -> Result<T> {
    softmax_cross_entropy(logits, labels).map(|(l, _)| l)
}

/// Mean binary cross-entropy and its gradient w.r.t. each probability.
pub fn binary_cross_entropy<T: Real>(probs: &[T], labels: &[u8]) -> Result<(T, Vec<T>)> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::Contract("MINT loss needs at least one sample".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} membership labels for {n} probabilities", labels.len())));
    }
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let inv_n = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(n);
    for (&p, &y) in probs.iter().zip(labels) {
        if p.is_nan() || p < T::zero() || p > T::one() {
            return Err(Error::Numeric(format!("probability {p:?} outside [0, 1]")));
        }
        if y > 1 {
            return Err(Error::Contract(format!("membership label {y} is not binary")));
        }
        let pc = p.max(lo).min(hi);
        let inside = p > lo && p < hi;
        if y == 1 {
            total = total - pc.ln();
            grad.push(if inside { -inv_n / pc } else { T::zero() });
        } else {
            total = total - (T::one() - pc).ln();
            grad.push(if inside { inv_n / (T::one() - pc) } else { T::zero() });
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean binary cross-entropy over the whole mixed batch.
pub fn mint_loss<T: Real>(probs: &[T], labels: &[u8]) -> Result<T> {
    binary_cross_entropy(probs, labels).map(|(l, _)| l)
}

/// `Σ w²` over the given parameters.
pub fn l2_sum<T: Real>(params: &[&Param<T>]) -> f64 {
    params.iter().flat_map(|p| p.value.iter()).map(|v| v.as_f64() * v.as_f64()).sum()
}

/// Combines raw losses into the weighted, normalized total. Normalizers must
/// already be updated for this step.
pub fn combine<T: Real>(
    audited_raw: f64,
    mint_raw: f64,
    norms: (&LossNormalizer, &LossNormalizer),
    weights: &LossWeights,
    params: &[&Param<T>],
) -> (MultiTaskLossOutput, GradScales) {
    let (na, nm) = norms;
    let audited_normed = audited_raw / na.value();
    let mint_normed = mint_raw / nm.value();
    let reg = if weights.l2_coeff > 0.0 { weights.l2_coeff * l2_sum(params) } else { 0.0 };
    let total = weights.lambda1 * audited_normed + weights.lambda2 * mint_normed + reg;
    let out = MultiTaskLossOutput { total, audited_raw, mint_raw, audited_normed, mint_normed, reg };
    let scales = GradScales { audited: weights.lambda1 / na.value(), mint: weights.lambda2 / nm.value(), l2: 2.0 * weights.l2_coeff };
    (out, scales)
}
