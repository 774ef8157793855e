//! Next-token logit providers for the two model roles.
//!
//! A [`BackendPair`] bundles the SLM and LLM handles with the prompt source
//! that seeds each generation episode.

pub mod external;
pub mod ngram;
mod planted;
pub mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::{LogitVector, TokenId, TokenSequence, Vocabulary};
use crate::stream::RandomStream;
use crate::uncertainty::PerturbationConfig;

pub use external::{ExternalBackendConfig, ExternalClient};
pub use ngram::{NGramModel, NGramPairConfig};
pub use synthetic::{PlantedLinear, SyntheticPair, SyntheticPairConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Slm,
    Llm,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Slm => "slm",
            Role::Llm => "llm",
        }
    }
}

/// A model that maps a token sequence to next-token logits.
///
/// Implementations must be pure in the sequence: the same input always gives
/// the same logits.
pub trait ModelBackend: Send + Sync {
    fn role(&self) -> Role;

    fn vocab(&self) -> Vocabulary;

    fn next_logits(&self, sequence: &[TokenId]) -> Result<LogitVector>;
}

/// Where each episode's prompt comes from.
#[derive(Debug, Clone)]
pub enum PromptSource {
    /// The episode index written in base `|V|`; used by sequence-agnostic
    /// backends that only need distinct prompts.
    EpisodeIndex { vocab_size: usize },
    /// A slice of `len` tokens at a seeded offset into a corpus.
    Corpus { tokens: Arc<Vec<TokenId>>, len: usize },
    Fixed(TokenSequence),
}

impl PromptSource {
    pub fn prompt(&self, seed: u64, episode: usize) -> TokenSequence {
        match self {
            PromptSource::EpisodeIndex { vocab_size } => {
                let mut rest = episode;
                let mut out = vec![TokenId::from(rest % vocab_size)];
                rest /= vocab_size;
                while rest > 0 {
                    out.push(TokenId::from(rest % vocab_size));
                    rest /= vocab_size;
                }
                TokenSequence::new(out)
            }
            PromptSource::Corpus { tokens, len } => {
                let len = (*len).min(tokens.len());
                let span = tokens.len() - len + 1;
                let start = RandomStream::new(seed, format!("prompt/{episode}")).below(span);
                tokens[start..start + len].iter().copied().collect()
            }
            PromptSource::Fixed(seq) => seq.clone(),
        }
    }
}

#[derive(Clone)]
pub struct BackendPair {
    pub slm: Arc<dyn ModelBackend>,
    pub llm: Arc<dyn ModelBackend>,
    pub prompts: PromptSource,
}

impl BackendPair {
    pub fn vocab(&self) -> Vocabulary {
        self.slm.vocab()
    }
}

impl std::fmt::Debug for BackendPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendPair")
            .field("vocab", &self.vocab())
            .field("prompts", &self.prompts)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Synthetic(SyntheticPairConfig),
    Ngram(NGramPairConfig),
    External(ExternalBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic(SyntheticPairConfig::default())
    }
}

impl BackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackendConfig::Synthetic(_) => "synthetic",
            BackendConfig::Ngram(_) => "ngram",
            BackendConfig::External(_) => "external",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackendConfig::Synthetic(c) => c.validate(),
            BackendConfig::Ngram(c) => c.validate(),
            BackendConfig::External(c) => c.validate(),
        }
    }

    /// Builds both roles. `seed` keys the synthetic generator; the other
    /// backends ignore it.
    pub fn build(&self, seed: u64, perturbation: &PerturbationConfig) -> Result<BackendPair> {
        match self {
            BackendConfig::Synthetic(c) => SyntheticPair::new(c, seed, perturbation).map(|p| p.into_backends()),
            BackendConfig::Ngram(c) => ngram::build_pair(c),
            BackendConfig::External(c) => external::connect_pair(c),
        }
    }
}

/// Rejects sequences containing tokens outside `vocab`.
pub(crate) fn check_sequence(vocab: &Vocabulary, sequence: &[TokenId]) -> Result<()> {
    sequence.iter().try_for_each(|t| vocab.check(*t))
}
