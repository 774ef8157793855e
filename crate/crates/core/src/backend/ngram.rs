//! Byte-level n-gram pair with add-ε smoothing.
//!
//! An order-`k` model conditions on the previous `k` tokens. Contexts never
//! seen in training, and sequences shorter than `k`, fall back to uniform.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_sequence, BackendPair, ModelBackend, PromptSource, Role};
use crate::error::{BackendError, Error, Result};
use crate::math::{LogitVector, TokenId, Vocabulary};
use crate::stream::RandomStream;

pub const MAGIC: &str = "UHLM-NGRAM-1";
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NGramPairConfig {
    pub corpus_path: PathBuf,
    /// Pre-trained pair to load instead of training on the corpus. The
    /// corpus is still used for prompts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub order_slm: usize,
    pub order_llm: usize,
    pub smoothing_epsilon: f64,
    pub eos_id: u32,
    pub prompt_len: usize,
}

impl Default for NGramPairConfig {
    fn default() -> Self {
        Self {
            corpus_path: PathBuf::new(),
            model_path: None,
            order_slm: 1,
            order_llm: 3,
            smoothing_epsilon: 1e-4,
            eos_id: 0,
            prompt_len: 16,
        }
    }
}

impl NGramPairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order_slm >= self.order_llm {
            return Err(Error::InvalidConfig(format!(
                "order_slm ({}) must be below order_llm ({})",
                self.order_slm, self.order_llm
            )));
        }
        if !(self.smoothing_epsilon > 0.0 && self.smoothing_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing_epsilon {} must be > 0",
                self.smoothing_epsilon
            )));
        }
        if self.corpus_path.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("ngram backend needs corpus_path".into()));
        }
        Vocabulary::new(BYTE_VOCAB, self.eos_id)?;
        Ok(())
    }
}

/// Count table of one order.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    epsilon: f64,
    vocab: Vocabulary,
    table: BTreeMap<Vec<u32>, ContextCounts>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ContextCounts {
    total: u64,
    counts: BTreeMap<u32, u64>,
}

impl NGramModel {
    pub fn train(tokens: &[TokenId], order: usize, epsilon: f64, vocab: Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(BackendError::EmptyCorpus.into());
        }
        check_sequence(&vocab, tokens)?;
        let mut table: BTreeMap<Vec<u32>, ContextCounts> = BTreeMap::new();
        for end in order..tokens.len() {
            let ctx: Vec<u32> = tokens[end - order..end].iter().map(|t| t.0).collect();
            let entry = table.entry(ctx).or_default();
            entry.total += 1;
            *entry.counts.entry(tokens[end].0).or_default() += 1;
        }
        Ok(Self { order, epsilon, vocab, table })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn contexts(&self) -> usize {
        self.table.len()
    }

    /// `(count + ε) / (total + ε|V|)` for the last `order` tokens.
    pub fn distribution(&self, sequence: &[TokenId]) -> Vec<f64> {
        let n = self.vocab.size();
        let uniform = vec![1.0 / n as f64; n];
        if sequence.len() < self.order {
            return uniform;
        }
        let ctx: Vec<u32> = sequence[sequence.len() - self.order..].iter().map(|t| t.0).collect();
        let Some(entry) = self.table.get(&ctx) else {
            return uniform;
        };
        let denom = entry.total as f64 + self.epsilon * n as f64;
        let mut p = vec![self.epsilon / denom; n];
        for (&tok, &count) in &entry.counts {
            p[tok as usize] = (count as f64 + self.epsilon) / denom;
        }
        p
    }

    pub fn logits(&self, sequence: &[TokenId]) -> LogitVector {
        LogitVector::new(self.distribution(sequence).into_iter().map(f64::ln).collect())
            .expect("smoothed probabilities are positive")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    magic: String,
    vocab_size: usize,
    eos_id: u32,
    epsilon: f64,
    slm: TableFile,
    llm: TableFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    order: usize,
    contexts: Vec<(Vec<u32>, ContextCounts)>,
}

impl From<&NGramModel> for TableFile {
    fn from(m: &NGramModel) -> Self {
        Self { order: m.order, contexts: m.table.iter().map(|(k, v)| (k.clone(), v.clone())).collect() }
    }
}

fn model_error(msg: impl Into<String>) -> Error {
    BackendError::ModelFile(msg.into()).into()
}

/// Trained SLM/LLM tables sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramPair {
    pub slm: NGramModel,
    pub llm: NGramModel,
}

impl NGramPair {
    pub fn train(tokens: &[TokenId], cfg: &NGramPairConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new(BYTE_VOCAB, cfg.eos_id)?;
        Ok(Self {
            slm: NGramModel::train(tokens, cfg.order_slm, cfg.smoothing_epsilon, vocab)?,
            llm: NGramModel::train(tokens, cfg.order_llm, cfg.smoothing_epsilon, vocab)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            magic: MAGIC.into(),
            vocab_size: self.slm.vocab.size(),
            eos_id: self.slm.vocab.eos_id().0,
            epsilon: self.slm.epsilon,
            slm: (&self.slm).into(),
            llm: (&self.llm).into(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| model_error(e.to_string()))?;
        if file.magic != MAGIC {
            return Err(model_error(format!("bad magic {:?}, expected {MAGIC}", file.magic)));
        }
        let vocab = Vocabulary::new(file.vocab_size, file.eos_id)?;
        if !(file.epsilon > 0.0) {
            return Err(model_error("epsilon must be positive"));
        }
        let table = |t: TableFile| -> Result<NGramModel> {
            for (ctx, counts) in &t.contexts {
                if ctx.len() != t.order {
                    return Err(model_error(format!("context of length {} in order-{} table", ctx.len(), t.order)));
                }
                let oov = ctx.iter().chain(counts.counts.keys()).find(|v| **v as usize >= vocab.size());
                if let Some(v) = oov {
                    return Err(model_error(format!("token {v} outside vocabulary")));
                }
                if counts.counts.values().sum::<u64>() != counts.total {
                    return Err(model_error("context total does not match its counts"));
                }
            }
            Ok(NGramModel { order: t.order, epsilon: file.epsilon, vocab, table: t.contexts.into_iter().collect() })
        };
        let pair = Self { slm: table(file.slm)?, llm: table(file.llm)? };
        if pair.slm.order >= pair.llm.order {
            return Err(model_error("slm order must be below llm order"));
        }
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn into_backends(self, prompts: PromptSource) -> BackendPair {
        BackendPair {
            slm: Arc::new(NGramBackend { role: Role::Slm, model: self.slm }),
            llm: Arc::new(NGramBackend { role: Role::Llm, model: self.llm }),
            prompts,
        }
    }
}

pub fn bytes_to_tokens(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|b| TokenId(*b as u32)).collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<TokenId>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(BackendError::EmptyCorpus.into());
    }
    Ok(bytes_to_tokens(&bytes))
}

/// Trains (or loads) the pair and takes prompts from the corpus.
pub fn build_pair(cfg: &NGramPairConfig) -> Result<BackendPair> {
    cfg.validate()?;
    let tokens = read_corpus(&cfg.corpus_path)?;
    let pair = match &cfg.model_path {
        Some(path) => NGramPair::load(path)?,
        None => NGramPair::train(&tokens, cfg)?,
    };
    let prompts = PromptSource::Corpus { tokens: Arc::new(tokens), len: cfg.prompt_len.max(1) };
    Ok(pair.into_backends(prompts))
}

const WORDS: [&str; 40] = [
    "the", "a", "river", "stone", "light", "over", "under", "quiet", "old", "town", "runs", "falls", "keeps",
    "bright", "and", "of", "in", "winter", "field", "north", "south", "bridge", "market", "bread", "salt",
    "wind", "slowly", "never", "before", "after", "green", "iron", "gate", "small", "hill", "rain", "road",
    "song", "clock", "night",
];

/// Pseudo-text built from a small word list with a sticky word-to-word
/// transition table, so short and long contexts predict differently.
pub fn demo_corpus(seed: u64, min_bytes: usize) -> Vec<u8> {
    let mut rng = RandomStream::new(seed, "corpus");
    let next: Vec<[usize; 3]> = (0..WORDS.len())
        .map(|_| [rng.below(WORDS.len()), rng.below(WORDS.len()), rng.below(WORDS.len())])
        .collect();
    let mut out = Vec::with_capacity(min_bytes + 64);
    let mut w = 0;
    let mut len = 0;
    while out.len() < min_bytes {
        out.extend_from_slice(WORDS[w].as_bytes());
        len += 1;
        if len >= 6 + rng.below(8) {
            out.extend_from_slice(b".\n");
            len = 0;
            w = rng.below(WORDS.len());
        } else {
            out.push(b' ');
            w = if rng.uniform() < 0.85 { next[w][rng.below(3)] } else { rng.below(WORDS.len()) };
        }
    }
    out
}

pub struct NGramBackend {
    role: Role,
    model: NGramModel,
}

impl ModelBackend for NGramBackend {
    fn role(&self) -> Role {
        self.role
    }

    fn vocab(&self) -> Vocabulary {
        self.model.vocab
    }

    fn next_logits(&self, sequence: &[TokenId]) -> Result<LogitVector> {
        check_sequence(&self.model.vocab, sequence)?;
        Ok(self.model.logits(sequence))
    }
}
