#![allow(dead_code)]

use std::sync::Arc;

use uhlm_core::backend::{BackendPair, ModelBackend, PromptSource, Role};
use uhlm_core::{LogitVector, Result, TokenId, TokenSequence, Vocabulary};

/// Both roles share one distribution, so every draft is accepted. EOS gets
/// a huge logit once the sequence reaches `eos_at` tokens and is otherwise
/// suppressed.
pub struct Scripted {
    pub role: Role,
    pub vocab: Vocabulary,
    pub eos_at: Option<usize>,
}

impl ModelBackend for Scripted {
    fn role(&self) -> Role {
        self.role
    }

    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn next_logits(&self, sequence: &[TokenId]) -> Result<LogitVector> {
        let mut z: Vec<f64> = (0..self.vocab.size()).map(|v| ((v * 7 + sequence.len()) % 5) as f64 * 0.3).collect();
        let eos = self.vocab.eos_id().index();
        z[eos] = match self.eos_at {
            Some(n) if sequence.len() >= n => 100.0,
            _ => -100.0,
        };
        LogitVector::new(z)
    }
}

pub fn scripted_pair(size: usize, eos_at: Option<usize>) -> BackendPair {
    let vocab = Vocabulary::new(size, 0).unwrap();
    BackendPair {
        slm: Arc::new(Scripted { role: Role::Slm, vocab, eos_at }),
        llm: Arc::new(Scripted { role: Role::Llm, vocab, eos_at }),
        prompts: PromptSource::Fixed(TokenSequence::new(vec![TokenId(1)])),
    }
}
