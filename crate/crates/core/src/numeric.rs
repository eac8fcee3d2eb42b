//! Logit vectors and the two numeric primitives everything else is built on:
//! a max-shifted softmax and an argmax with a fixed lowest-id tie-break.
//!
//! All arithmetic is `f64`. Fusion rules add up to four scaled branch vectors,
//! and the wire protocol promises 1e-9 parity, so a fixed 64-bit width is used
//! throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Unnormalized next-token scores over a fixed vocabulary.
///
/// Construction rejects NaN and infinities, so every value that reaches the
/// fusion arithmetic is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        self.0.get(id as usize).copied()
    }

    pub fn argmax(&self) -> Result<TokenId> {
        argmax_token(&self.0)
    }

    /// `self += scale * other`.
    pub(crate) fn add_scaled(&mut self, other: &LogitVector, scale: f64) -> Result<()> {
        check_same_len(self, other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    /// `a * self + b * other` as a new vector.
    pub(crate) fn lincomb(&self, a: f64, other: &LogitVector, b: f64) -> Result<LogitVector> {
        check_same_len(self, other)?;
        let values = self.0.iter().zip(&other.0).map(|(x, y)| a * x + b * y).collect();
        Ok(LogitVector(values))
    }

    /// Indices of the `k` largest entries, best first (ties by lowest id).
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&i, &j| self.0[j].total_cmp(&self.0[i]).then(i.cmp(&j)));
        order
            .into_iter()
            .take(k)
            .map(|i| (i as TokenId, self.0[i]))
            .collect()
    }

    /// Largest entry minus the runner-up; infinite for a single-entry vector.
    pub fn top_margin(&self) -> f64 {
        match self.top_k(2).as_slice() {
            [(_, a), (_, b)] => a - b,
            _ => f64::INFINITY,
        }
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        LogitVector::new(values)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_same_len(a: &LogitVector, b: &LogitVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "logit length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Softmax with max-subtraction, so `[1000, 1000, 1000]` does not overflow.
pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input is not finite"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Index of the largest entry. Ties go to the lowest token id.
pub fn argmax_token(v: &[f64]) -> Result<TokenId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::invalid(format!("logit {i} is not finite")));
        }
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i as TokenId)
        .ok_or_else(|| Error::invalid("argmax of an empty vector"))
}
