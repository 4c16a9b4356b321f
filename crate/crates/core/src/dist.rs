//! Probability distributions over discrete actions plus the numeric
//! helpers (softmax, log-sum-exp, KL divergence) every algorithm leans on.

use crate::error::{BrlError, Result};
use rand::Rng;

/// Tolerance for "probabilities sum to one" checks.
const SUM_TOL: f64 = 1e-9;

/// A probability distribution over the actions `0..A-1` of an environment.
///
/// Used for behavior priors `p(a|s)` and learned policies `π(a|s)` evaluated
/// at a single state. Immutable after construction; construction validates
/// non-negativity and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    /// Wraps a probability vector, checking it is a valid distribution:
    /// non-empty, entries ≥ 0 and finite, summing to 1 ± 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(BrlError::usage("action distribution must be non-empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(BrlError::usage(format!(
                "action distribution entries must be finite and non-negative, got {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(BrlError::usage(format!(
                "action distribution must sum to 1 (got {sum})"
            )));
        }
        Ok(ActionDistribution { probs })
    }

    /// The uniform distribution over `n` actions.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(BrlError::usage("uniform distribution needs n >= 1"));
        }
        Ok(ActionDistribution {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn action_count(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs[action]
    }

    /// Natural log of `prob(action)`; `-inf` for zero-probability actions.
    pub fn log_prob(&self, action: usize) -> f64 {
        self.probs[action].ln()
    }

    /// Actions with strictly positive probability, ascending.
    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len()).filter(|&a| self.probs[a] > 0.0).collect()
    }

    /// Highest-probability action; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for a in 1..self.probs.len() {
            if self.probs[a] > self.probs[best] {
                best = a;
            }
        }
        best
    }

    /// Draws one action by inverse-CDF walk over the probability vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // Rounding can leave acc a hair below 1; fall back to the last
        // positive-probability action.
        self.support().pop().unwrap_or(self.probs.len() - 1)
    }
}

/// Numerically stable softmax: `exp(x_i - logsumexp(x))`.
///
/// `-inf` logits are allowed and yield probability zero (used to exclude
/// actions); `NaN` or `+inf` logits are usage errors, as is an input where
/// every entry is `-inf`.
pub fn softmax(logits: &[f64]) -> Result<ActionDistribution> {
    if logits.is_empty() {
        return Err(BrlError::usage("softmax of empty vector"));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(BrlError::usage(format!(
            "softmax logits must be < +inf and not NaN, got {logits:?}"
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(BrlError::usage("softmax with all logits -inf"));
    }
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ActionDistribution::new(exps.iter().map(|e| e / sum).collect())
}

/// `log Σ_i exp(v_i)`, computed with max-subtraction so that large-magnitude
/// inputs neither overflow nor underflow.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(BrlError::usage("log_sum_exp of empty vector"));
    }
    if values.iter().any(|x| x.is_nan()) {
        return Err(BrlError::usage("log_sum_exp of NaN"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (sum of zeros) or some +inf: the limit value is exact.
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `D_KL[q ‖ p] = Σ_x q(x)(log q(x) − log p(x))`, with `0·log 0 := 0`.
///
/// When `q` puts mass where `p` has none, the divergence is genuinely
/// infinite; this returns `+inf` as an explicit sentinel rather than
/// flooring `p`, so callers see support violations instead of a silently
/// smoothed number.
pub fn kl_divergence(q: &ActionDistribution, p: &ActionDistribution) -> Result<f64> {
    if q.action_count() != p.action_count() {
        return Err(BrlError::usage(format!(
            "KL between distributions of different lengths ({} vs {})",
            q.action_count(),
            p.action_count()
        )));
    }
    let mut kl = 0.0;
    for (qx, px) in q.probs().iter().zip(p.probs()) {
        if *qx == 0.0 {
            continue;
        }
        if *px == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += qx * (qx.ln() - px.ln());
    }
    // KL is non-negative; rounding in the sum can leave a tiny negative
    // residue for near-identical inputs.
    debug_assert!(kl > -1e-9, "KL frankly negative: {kl}");
    Ok(kl.max(0.0))
}
