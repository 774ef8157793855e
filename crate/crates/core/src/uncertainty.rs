//! Temperature-perturbation uncertainty and the uplink skip rule.
//!
//! The SLM logits are re-normalized at `K` random temperatures, one token is
//! drawn from each tempered distribution, and the uncertainty of the draft is
//! the fraction of those tokens that differ from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sample_categorical, temperature_softmax, TokenId, MIN_TEMPERATURE};
use crate::stream::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    /// Number of temperature samples `K`.
    pub samples: usize,
    pub theta_max: f64,
    pub theta_min: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { samples: 20, theta_max: 2.0, theta_min: MIN_TEMPERATURE }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("perturbation samples must be >= 1".into()));
        }
        if !(self.theta_min > 0.0 && self.theta_min < self.theta_max && self.theta_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < theta_min < theta_max, got [{}, {}]",
                self.theta_min, self.theta_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyEstimate {
    pub u: f64,
    pub mismatches: usize,
    /// The sampled tokens `d_1..d_K`, in sample order.
    pub samples: Vec<TokenId>,
}

impl UncertaintyEstimate {
    /// Uncertainty the same samples would assign to another draft token.
    pub fn uncertainty_for(&self, token: TokenId) -> f64 {
        let miss = self.samples.iter().filter(|s| **s != token).count();
        miss as f64 / self.samples.len() as f64
    }
}

/// `theta_k` for `k = 0..K`, each drawn from its own `"{label}/k"` substream.
pub fn sample_temperatures(cfg: &PerturbationConfig, rng: &RandomStream) -> Vec<f64> {
    (0..cfg.samples)
        .map(|k| rng.derive(k).uniform_in(cfg.theta_min, cfg.theta_max))
        .collect()
}

pub fn measure_uncertainty(
    z: &[f64],
    d: TokenId,
    cfg: &PerturbationConfig,
    rng: &RandomStream,
) -> Result<UncertaintyEstimate> {
    cfg.validate()?;
    if d.index() >= z.len() {
        return Err(Error::OutOfVocabulary { token: d.0, size: z.len() });
    }
    let mut samples = Vec::with_capacity(cfg.samples);
    for k in 0..cfg.samples {
        // same substream as sample_temperatures: first draw is theta_k
        let mut sub = rng.derive(k);
        let theta = sub.uniform_in(cfg.theta_min, cfg.theta_max);
        let tempered = temperature_softmax(z, theta)?;
        samples.push(sample_categorical(&tempered, &mut sub));
    }
    let mismatches = samples.iter().filter(|s| **s != d).count();
    Ok(UncertaintyEstimate { u: mismatches as f64 / cfg.samples as f64, mismatches, samples })
}

/// `0` (skip, the draft becomes the response) when `u <= u_th`, else `1`.
pub fn skip_decision(u: f64, u_th: f64) -> u8 {
    if u <= u_th {
        0
    } else {
        1
    }
}
