//! Server-side verification of a single draft token.
//!
//! The draft `d ~ x` is accepted outright when `x_d <= y_d`. Otherwise it is
//! rejected with probability `1 - y_d / x_d` and a replacement is drawn from
//! the normalized positive part of `y - x`. The response then follows `y`
//! exactly, which [`effective_distribution`] computes in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sample_categorical, TokenId, VocabDistribution};
use crate::stream::RandomStream;

/// Residual mass below which a rejection is treated as numerically empty.
const MIN_RESIDUAL_MASS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    ImmediateAccept,
    ProbabilisticAccept,
    Rejected,
}

impl Decision {
    pub fn is_accept(self) -> bool {
        !matches!(self, Decision::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    pub decision: Decision,
    pub response: TokenId,
    pub beta: f64,
    /// Present iff `decision` is `Rejected`.
    pub residual: Option<VocabDistribution>,
}

/// `max(1 - y_d / x_d, 0)`.
pub fn rejection_probability(x_d: f64, y_d: f64) -> Result<f64> {
    if !(x_d > 0.0) {
        return Err(Error::InvalidDraftProbability(x_d));
    }
    Ok((1.0 - y_d / x_d).max(0.0))
}

fn positive_part_mass(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (b - a).max(0.0)).sum()
}

/// Normalized `max(y - x, 0)`.
pub fn residual_distribution(x: &VocabDistribution, y: &VocabDistribution) -> Result<VocabDistribution> {
    check_pair(x, y)?;
    let diff: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| (b - a).max(0.0)).collect();
    let total: f64 = diff.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateResidual);
    }
    VocabDistribution::new(diff.into_iter().map(|v| v / total).collect())
}

fn check_pair(x: &VocabDistribution, y: &VocabDistribution) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidDistribution(format!(
            "draft has {} entries, target has {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Verifies draft `d`. Consumes no draws on immediate acceptance, one uniform
/// for the accept/reject coin, and one more to resample after a rejection.
pub fn verify(
    x: &VocabDistribution,
    y: &VocabDistribution,
    d: TokenId,
    rng: &mut RandomStream,
) -> Result<VerificationOutcome> {
    check_pair(x, y)?;
    if d.index() >= x.len() {
        return Err(Error::OutOfVocabulary { token: d.0, size: x.len() });
    }
    let (x_d, y_d) = (x.prob(d), y.prob(d));
    let beta = rejection_probability(x_d, y_d)?;
    if x_d <= y_d {
        return Ok(VerificationOutcome {
            decision: Decision::ImmediateAccept,
            response: d,
            beta,
            residual: None,
        });
    }
    let coin = rng.uniform();
    if coin < beta && positive_part_mass(x, y) >= MIN_RESIDUAL_MASS {
        let residual = residual_distribution(x, y)?;
        let response = sample_categorical(&residual, rng);
        return Ok(VerificationOutcome {
            decision: Decision::Rejected,
            response,
            beta,
            residual: Some(residual),
        });
    }
    Ok(VerificationOutcome {
        decision: Decision::ProbabilisticAccept,
        response: d,
        beta,
        residual: None,
    })
}

/// Exact law of the response token under [`verify`], obtained by summing over
/// every draft outcome. Equals `y` up to rounding.
pub fn effective_distribution(x: &VocabDistribution, y: &VocabDistribution) -> Result<VocabDistribution> {
    check_pair(x, y)?;
    let skip = vec![0.0; x.len()];
    VocabDistribution::from_weights(gated_response_law(x, y, &skip))
}

/// Response law when draft token `v` bypasses verification with probability
/// `skip[v]` and is verified otherwise.
///
/// `skip = 0` everywhere recovers `y`; `skip = 1` everywhere recovers `x`.
pub fn gated_response_law(x: &[f64], y: &[f64], skip: &[f64]) -> Vec<f64> {
    debug_assert!(x.len() == y.len() && x.len() == skip.len());
    let surplus = positive_part_mass(x, y);
    let rejected_mass: f64 = x
        .iter()
        .zip(y)
        .zip(skip)
        .map(|((a, b), s)| (1.0 - s) * (a - b).max(0.0))
        .sum();
    let scale = if surplus > 0.0 { rejected_mass / surplus } else { 0.0 };
    x.iter()
        .zip(y)
        .zip(skip)
        .map(|((&a, &b), &s)| s * a + (1.0 - s) * a.min(b) + scale * (b - a).max(0.0))
        .collect()
}
