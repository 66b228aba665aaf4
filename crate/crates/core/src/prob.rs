//! Numerically robust probability primitives over the vocabulary.
//!
//! All arithmetic is done in `f64` with compensated summation, regardless of
//! the `f32` storage used by logit stacks.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor used by [`log_safe_ratio`].
pub const LOG_RATIO_EPS: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` accepted by [`ProbDist::new`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Raw logits indexed by token id. Every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("empty logit vector".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A normalized distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates non-negativity and normalization within [`NORMALIZATION_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Dimension("empty distribution".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if p < 0.0 {
                return Err(Error::Domain(format!(
                    "negative probability {p} at index {i}"
                )));
            }
        }
        let total = kahan_sum(probs.iter().copied());
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: usize) -> Option<f64> {
        self.0.get(token).copied()
    }

    /// Largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Softmax temperature. Always strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::param(
                "tau",
                format!("must be positive and finite, got {tau}"),
            ));
        }
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Neumaier-compensated sum.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(z / tau)` with max subtraction.
pub fn softmax(z: &LogitVector, tau: Temperature) -> ProbDist {
    ProbDist(softmax_slice(z.as_slice(), tau))
}

/// Softmax over an `f32` row without an intermediate [`LogitVector`].
pub fn softmax_f32(z: &[f32], tau: Temperature) -> Result<ProbDist> {
    if z.is_empty() {
        return Err(Error::Dimension("empty logit vector".into()));
    }
    let wide: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
    if let Some(index) = wide.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(ProbDist(softmax_slice(&wide, tau)))
}

fn softmax_slice(z: &[f64], tau: Temperature) -> Vec<f64> {
    let tau = tau.get();
    let max = z[argmax(z)];
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total = kahan_sum(out.iter().copied());
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `z - logsumexp(z)` at unit temperature.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z[argmax(z)];
    let lse = max + kahan_sum(z.iter().map(|&v| (v - max).exp())).ln();
    z.iter().map(|&v| v - lse).collect()
}

/// Jensen-Shannon divergence in nats, bounded by `ln 2`.
pub fn jsd(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "jsd over distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    // Each term is symmetric in (a, b), so jsd(p, q) == jsd(q, p) bitwise.
    let terms = p.as_slice().iter().zip(q.as_slice()).map(|(&a, &b)| {
        let m = 0.5 * (a + b);
        let mut t = 0.0;
        if a > 0.0 {
            t += a * (a / m).ln();
        }
        if b > 0.0 {
            t += b * (b / m).ln();
        }
        0.5 * t
    });
    Ok(kahan_sum(terms).clamp(0.0, LN_2))
}

/// `ln((a + eps) / (b + eps))` for probabilities `a`, `b`.
pub fn log_safe_ratio(a: f64, b: f64, eps: f64) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    for (name, v) in [("a", a), ("b", b)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} = {v} is not a probability")));
        }
    }
    Ok(((a + eps) / (b + eps)).ln())
}
