//! Deterministic test doubles for the language-model and chat interfaces.
//!
//! These back the offline CLI mode and the test suites; nothing here talks
//! to the network.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::generation::LanguageModel;
use crate::http::ClientError;
use crate::reasoning::ChatModel;
use crate::tokenizer::TokenId;

type Weights = Vec<(TokenId, f64)>;

/// Scripted language model.
///
/// Lookup order for the next distribution: an exact generated-prefix entry
/// from a script registered for this prompt (or for any prompt), then the
/// longest matching context-suffix rule, then the fallback distribution.
#[derive(Debug, Clone)]
pub struct MockLm {
    vocab_size: usize,
    fallback: Weights,
    suffix_rules: Vec<(Vec<TokenId>, Weights)>,
    /// prompt (empty = any) → generated prefix → next-token weights
    scripts: HashMap<Vec<TokenId>, HashMap<Vec<TokenId>, Weights>>,
    smoothing: f64,
}

impl MockLm {
    /// A model that puts all mass on `fallback` until rules are added.
    pub fn new(vocab_size: usize, fallback: TokenId) -> Self {
        Self {
            vocab_size,
            fallback: vec![(fallback, 1.0)],
            suffix_rules: Vec::new(),
            scripts: HashMap::new(),
            smoothing: 0.0,
        }
    }

    /// Mixes `eps` of uniform mass into every distribution.
    pub fn with_smoothing(mut self, eps: f64) -> Self {
        self.smoothing = eps.clamp(0.0, 1.0);
        self
    }

    /// After a context ending in `suffix`, emit according to `weights`.
    pub fn rule(mut self, suffix: Vec<TokenId>, weights: Vec<(TokenId, f64)>) -> Self {
        self.suffix_rules.push((suffix, weights));
        self
    }

    /// Registers a complete output sequence for `prompt` (empty = any prompt).
    /// Sequences sharing a prefix branch with probability proportional to
    /// their weights.
    pub fn script(mut self, prompt: &[TokenId], sequence: &[TokenId], weight: f64) -> Self {
        self.add_script(prompt, sequence, weight);
        self
    }

    pub fn add_script(&mut self, prompt: &[TokenId], sequence: &[TokenId], weight: f64) {
        let table = self.scripts.entry(prompt.to_vec()).or_default();
        for i in 0..sequence.len() {
            let next = table.entry(sequence[..i].to_vec()).or_default();
            match next.iter_mut().find(|(t, _)| *t == sequence[i]) {
                Some(slot) => slot.1 += weight,
                None => next.push((sequence[i], weight)),
            }
        }
    }

    fn weights_for(&self, prompt: &[TokenId], generated: &[TokenId]) -> &Weights {
        for key in [prompt, &[][..]] {
            if let Some(w) = self.scripts.get(key).and_then(|t| t.get(generated)) {
                return w;
            }
        }
        self.suffix_rules
            .iter()
            .filter(|(s, _)| generated.ends_with(s))
            .max_by_key(|(s, _)| s.len())
            .map_or(&self.fallback, |(_, w)| w)
    }
}

impl LanguageModel for MockLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, prompt: &[TokenId], generated: &[TokenId]) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab_size];
        let weights = self.weights_for(prompt, generated);
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if total > 0.0 {
            for &(t, w) in weights {
                if let Some(slot) = p.get_mut(t as usize) {
                    *slot += w / total;
                }
            }
        }
        if self.smoothing > 0.0 && self.vocab_size > 0 {
            let u = self.smoothing / self.vocab_size as f64;
            for v in &mut p {
                *v = *v * (1.0 - self.smoothing) + u;
            }
        }
        p
    }
}

/// One scripted chat rule: if the prompt contains `needle`, answer `response`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRule {
    pub needle: String,
    pub response: String,
}

/// Chat model answering from substring rules, first match wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedChat {
    #[serde(default)]
    pub rules: Vec<ChatRule>,
    #[serde(default)]
    pub default_response: Option<String>,
}

impl ScriptedChat {
    pub fn rule(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(ChatRule {
            needle: needle.into(),
            response: response.into(),
        });
        self
    }

    pub fn otherwise(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }
}

impl ChatModel for ScriptedChat {
    fn chat(&self, prompt: &str) -> Result<String, ClientError> {
        self.rules
            .iter()
            .find(|r| prompt.contains(&r.needle))
            .map(|r| r.response.clone())
            .or_else(|| self.default_response.clone())
            .ok_or_else(|| ClientError::Protocol("no scripted response".into()))
    }
}
