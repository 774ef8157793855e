//! Sequence-agnostic synthetic model pair.
//!
//! Every distinct sequence hashes to a fresh `(x, y)` pair, so the pair
//! statistics are exactly controlled and rounds are i.i.d. Two modes exist:
//!
//! * Dirichlet: `y ~ Dir(α)`, `x = c·y + (1 - c)·y'` with an independent `y'`.
//!   Mean rejection is `(1 - c)·E[TV(y', y)]`, and can be pinned by tuning `c`.
//! * Planted linear: rejection probability is a prescribed linear function of
//!   the perturbation uncertainty (see the `planted` module).

use std::sync::Arc;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::planted::{PlantedDesign, SUPPORT_SIZES};
use super::{check_sequence, BackendPair, ModelBackend, PromptSource, Role};
use crate::error::{Error, Result};
use crate::math::{total_variation, LogitVector, TokenId, VocabDistribution, Vocabulary};
use crate::stream::RandomStream;
use crate::uncertainty::PerturbationConfig;

const TUNING_PAIRS: usize = 1000;
const TUNING_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPairConfig {
    pub vocab_size: usize,
    pub eos_id: u32,
    pub dirichlet_alpha: f64,
    pub coupling: f64,
    /// Target `E[β]`; when set, `coupling` is tuned to reach it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_rejection_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_linear: Option<PlantedLinear>,
    /// Generator seed; defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticPairConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            eos_id: 0,
            dirichlet_alpha: 0.5,
            coupling: 0.5,
            planted_rejection_mean: None,
            planted_linear: None,
            seed: None,
        }
    }
}

/// Requested population regression `β ≈ a·u + b`, and optionally the share
/// `delta` of rounds with `y_d < x_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedLinear {
    pub a: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Upper end of the lead-margin range; overrides `delta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_max: Option<f64>,
}

impl SyntheticPairConfig {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size, self.eos_id)?;
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("dirichlet_alpha {} must be > 0", self.dirichlet_alpha)));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::InvalidConfig(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if let Some(m) = self.planted_rejection_mean {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::InvalidConfig(format!("planted_rejection_mean {m} outside [0, 1]")));
            }
        }
        if let Some(p) = &self.planted_linear {
            if self.planted_rejection_mean.is_some() {
                return Err(Error::InvalidConfig(
                    "planted_linear and planted_rejection_mean are mutually exclusive".into(),
                ));
            }
            let need = SUPPORT_SIZES[SUPPORT_SIZES.len() - 1] + 2;
            if self.vocab_size < need {
                return Err(Error::InvalidConfig(format!("planted_linear needs vocab_size >= {need}")));
            }
            if let Some(d) = p.delta {
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::InvalidConfig(format!("planted delta {d} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Mode {
    Dirichlet { gamma: Gamma<f64>, coupling: f64 },
    Planted(PlantedDesign),
}

/// The resolved generator shared by both backend roles.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    vocab: Vocabulary,
    seed: u64,
    mode: Mode,
}

impl SyntheticPair {
    pub fn new(cfg: &SyntheticPairConfig, run_seed: u64, perturbation: &PerturbationConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new(cfg.vocab_size, cfg.eos_id)?;
        let seed = cfg.seed.unwrap_or(run_seed);
        let mode = if let Some(p) = &cfg.planted_linear {
            Mode::Planted(PlantedDesign::solve(p.a, p.b, p.delta, p.margin_max, perturbation)?)
        } else {
            let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0)
                .map_err(|e| Error::InvalidConfig(format!("dirichlet_alpha: {e}")))?;
            let coupling = match cfg.planted_rejection_mean {
                Some(target) => tune_coupling(&gamma, cfg.vocab_size, target, seed)?,
                None => cfg.coupling,
            };
            Mode::Dirichlet { gamma, coupling }
        };
        Ok(Self { vocab, seed, mode })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    /// Effective coupling in Dirichlet mode, after any tuning.
    pub fn coupling(&self) -> Option<f64> {
        match &self.mode {
            Mode::Dirichlet { coupling, .. } => Some(*coupling),
            Mode::Planted(_) => None,
        }
    }

    /// Solved plant `(A, B, margin_max, Δ)` in planted mode.
    pub fn planted_parameters(&self) -> Option<(f64, f64, f64, f64)> {
        match &self.mode {
            Mode::Planted(d) => Some((d.slope, d.intercept, d.margin_max, d.delta)),
            Mode::Dirichlet { .. } => None,
        }
    }

    /// Draws a pair from `rng` as `(SLM logits, LLM logits)`. Both sides go
    /// through the same logit round trip, so `x == y` survives exactly.
    fn draw(&self, rng: &mut RandomStream) -> Result<(LogitVector, LogitVector)> {
        let (x, y) = match &self.mode {
            Mode::Dirichlet { gamma, coupling } => dirichlet_pair(gamma, self.vocab.size(), *coupling, rng)?,
            Mode::Planted(d) => {
                let (z, y) = d.draw(self.vocab.size(), self.vocab.eos_id().index(), rng);
                return Ok((LogitVector::new(z)?, VocabDistribution::from_weights(y)?.to_logits()));
            }
        };
        Ok((x.to_logits(), y.to_logits()))
    }

    /// `(x, y)` for an explicit stream, bypassing sequence hashing.
    pub fn pair(&self, rng: &mut RandomStream) -> Result<(VocabDistribution, VocabDistribution)> {
        let (zx, zy) = self.draw(rng)?;
        Ok((crate::math::softmax(&zx)?, crate::math::softmax(&zy)?))
    }

    fn stream_for(&self, sequence: &[TokenId]) -> RandomStream {
        let mut h = Sha256::new();
        for t in sequence {
            h.update(t.0.to_le_bytes());
        }
        RandomStream::new(self.seed, format!("synthetic/{}", hex::encode(h.finalize())))
    }

    fn logits(&self, role: Role, sequence: &[TokenId]) -> Result<LogitVector> {
        check_sequence(&self.vocab, sequence)?;
        let (zx, zy) = self.draw(&mut self.stream_for(sequence))?;
        Ok(match role {
            Role::Slm => zx,
            Role::Llm => zy,
        })
    }

    pub fn into_backends(self) -> BackendPair {
        let shared = Arc::new(self);
        let prompts = PromptSource::EpisodeIndex { vocab_size: shared.vocab.size() };
        BackendPair {
            slm: Arc::new(SyntheticBackend { role: Role::Slm, pair: shared.clone() }),
            llm: Arc::new(SyntheticBackend { role: Role::Llm, pair: shared }),
            prompts,
        }
    }
}

pub struct SyntheticBackend {
    role: Role,
    pair: Arc<SyntheticPair>,
}

impl ModelBackend for SyntheticBackend {
    fn role(&self) -> Role {
        self.role
    }

    fn vocab(&self) -> Vocabulary {
        self.pair.vocab
    }

    fn next_logits(&self, sequence: &[TokenId]) -> Result<LogitVector> {
        self.pair.logits(self.role, sequence)
    }
}

fn dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut RandomStream) -> Result<VocabDistribution> {
    VocabDistribution::from_weights((0..n).map(|_| gamma.sample(rng)).collect())
}

fn mix(y: &[f64], other: &[f64], coupling: f64) -> Vec<f64> {
    y.iter().zip(other).map(|(a, b)| coupling * a + (1.0 - coupling) * b).collect()
}

fn dirichlet_pair(
    gamma: &Gamma<f64>,
    n: usize,
    coupling: f64,
    rng: &mut RandomStream,
) -> Result<(VocabDistribution, VocabDistribution)> {
    let y = dirichlet(gamma, n, rng)?;
    let other = dirichlet(gamma, n, rng)?;
    if coupling == 1.0 {
        return Ok((y.clone(), y));
    }
    let x = VocabDistribution::from_weights(mix(&y, &other, coupling))?;
    Ok((x, y))
}

/// Draws `(x, y)` with `x = c·y + (1 - c)·y'`.
pub fn synthetic_pair(
    cfg: &SyntheticPairConfig,
    rng: &mut RandomStream,
) -> Result<(VocabDistribution, VocabDistribution)> {
    cfg.validate()?;
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let coupling = match cfg.planted_rejection_mean {
        Some(target) => tune_coupling(&gamma, cfg.vocab_size, target, rng.seed())?,
        None => cfg.coupling,
    };
    dirichlet_pair(&gamma, cfg.vocab_size, coupling, rng)
}

/// Bisects the coupling so that the mean of `E[β | x, y] = TV(x, y)` over a
/// fixed tuning sample matches `target`.
fn tune_coupling(gamma: &Gamma<f64>, n: usize, target: f64, seed: u64) -> Result<f64> {
    let mut rng = RandomStream::new(seed, "synthetic/tuning");
    let mut pairs = Vec::with_capacity(TUNING_PAIRS);
    for _ in 0..TUNING_PAIRS {
        pairs.push((dirichlet(gamma, n, &mut rng)?, dirichlet(gamma, n, &mut rng)?));
    }
    let mean_beta = |c: f64| {
        pairs.iter().map(|(y, o)| total_variation(&mix(y, o, c), y)).sum::<f64>() / pairs.len() as f64
    };
    let max = mean_beta(0.0);
    if target > max + TUNING_TOLERANCE {
        return Err(Error::CalibrationInfeasible { target, max });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = mean_beta(mid);
        if (f - target).abs() <= TUNING_TOLERANCE {
            return Ok(mid);
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
