//! Vocabulary types, softmax with temperature, and categorical sampling.
//!
//! Probabilities are always held as `f64`, whatever precision the simulated
//! uplink uses for its payload.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::RandomStream;

/// Lower clamp for sampled temperatures. Near zero the tempered softmax is
/// already an argmax, and dividing by smaller values only invites overflow.
pub const MIN_TEMPERATURE: f64 = 1e-3;

/// Absolute tolerance on the sum of a probability vector.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, eos_id: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!("vocabulary size {size} < 2")));
        }
        if eos_id as usize >= size {
            return Err(Error::InvalidConfig(format!(
                "eos id {eos_id} outside vocabulary of size {size}"
            )));
        }
        Ok(Self { size, eos_id: TokenId(eos_id) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if token.index() < self.size {
            Ok(())
        } else {
            Err(Error::OutOfVocabulary { token: token.0, size: self.size })
        }
    }
}

/// Prompt followed by the response tokens generated so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn push(&mut self, token: TokenId) {
        self.0.push(token);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl FromIterator<TokenId> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// A finite logit vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LogitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability vector over the vocabulary. Construction validates it.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct VocabDistribution(Vec<f64>);

impl VocabDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights cannot be normalized (total {total})"
            )));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[token.index()]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.0.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        TokenId::from(best)
    }

    /// Logits that reproduce this distribution under `softmax`. Zero entries
    /// are floored so the logits stay finite.
    pub fn to_logits(&self) -> LogitVector {
        LogitVector(self.0.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect())
    }
}

impl Deref for VocabDistribution {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for VocabDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(de)?;
        VocabDistribution::new(v).map_err(serde::de::Error::custom)
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::InvalidLogits("empty logit vector".into()));
    }
    if let Some((i, v)) = z.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidLogits(format!("entry {i} is {v}")));
    }
    Ok(())
}

fn normalized_exp(scaled: impl Iterator<Item = f64> + Clone) -> VocabDistribution {
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.map(|v| (v - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    VocabDistribution(probs)
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Result<VocabDistribution> {
    check_finite(z)?;
    Ok(normalized_exp(z.iter().copied()))
}

/// Temperature-scaled softmax, `exp(z_v / theta)` normalized.
pub fn temperature_softmax(z: &[f64], theta: f64) -> Result<VocabDistribution> {
    if !(theta >= MIN_TEMPERATURE) || !theta.is_finite() {
        return Err(Error::InvalidTemperature { theta, min: MIN_TEMPERATURE });
    }
    check_finite(z)?;
    Ok(normalized_exp(z.iter().map(move |v| v / theta)))
}

/// Inverse-CDF sampling from a single uniform draw.
pub fn sample_categorical(p: &VocabDistribution, rng: &mut RandomStream) -> TokenId {
    let u = rng.uniform();
    inverse_cdf(p, u)
}

/// The token whose cumulative interval contains `u` (`u` in `[0, 1)`).
/// Zero-probability tokens are never returned.
pub fn inverse_cdf(p: &VocabDistribution, u: f64) -> TokenId {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &q) in p.iter().enumerate() {
        if q <= 0.0 {
            continue;
        }
        cum += q;
        last_positive = i;
        if u < cum {
            return TokenId::from(i);
        }
    }
    // rounding left the cumulative sum just under u
    TokenId::from(last_positive)
}

/// Total-variation distance, half the L1 distance.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
