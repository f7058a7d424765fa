//! Remote generation for backends that cannot expose per-step distributions.
//!
//! Without token-level access the trie cannot mask anything, so the engine
//! asks for several samples and keeps only those whose entity spans are all
//! in the trie ("generate-then-validate"). Entity soundness then holds by
//! filtering rather than by construction.

use serde_json::json;

use crate::http::{ClientError, JsonClient};
use crate::tokenizer::{Tokenizer, ENTITY_CLOSE_TEXT, ENTITY_OPEN_TEXT};
use crate::trie::EntityTrie;

pub trait CompletionModel: Send + Sync {
    /// `n` independent completions of `prompt`.
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, ClientError>;
}

/// OpenAI-completions-compatible backend.
#[derive(Debug, Clone)]
pub struct RemoteCompletionModel {
    client: JsonClient,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_logprobs: u32,
}

impl RemoteCompletionModel {
    pub fn new(client: JsonClient) -> Self {
        Self {
            client,
            max_tokens: 256,
            temperature: 0.7,
            top_logprobs: 5,
        }
    }
}

impl CompletionModel for RemoteCompletionModel {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        let body = json!({
            "model": self.client.settings().model,
            "prompt": prompt,
            "n": n,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "logprobs": self.top_logprobs,
        });
        let resp = self.client.post("completions", &body)?;
        let choices = resp
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| ClientError::Protocol("missing choices".into()))?;
        choices
            .iter()
            .map(|c| {
                c.get("text")
                    .and_then(|t| t.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| ClientError::Protocol("choice without text".into()))
            })
            .collect()
    }
}

/// Labels wrapped in `<e>`…`</e>`, or `None` if a span is left unclosed or
/// markers are nested.
pub fn text_entity_spans(text: &str) -> Option<Vec<&str>> {
    let mut spans = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find(ENTITY_OPEN_TEXT) {
        if rest[..open].contains(ENTITY_CLOSE_TEXT) {
            return None;
        }
        let after = &rest[open + ENTITY_OPEN_TEXT.len()..];
        let close = after.find(ENTITY_CLOSE_TEXT)?;
        let label = &after[..close];
        if label.contains(ENTITY_OPEN_TEXT) {
            return None;
        }
        spans.push(label);
        rest = &after[close + ENTITY_CLOSE_TEXT.len()..];
    }
    if rest.contains(ENTITY_CLOSE_TEXT) {
        return None;
    }
    Some(spans)
}

/// Whether every entity span in `text` is a complete trie entry.
pub fn spans_in_trie<T: Tokenizer + ?Sized>(text: &str, trie: &EntityTrie, tokenizer: &T) -> bool {
    text_entity_spans(text)
        .is_some_and(|spans| spans.iter().all(|s| trie.contains(&tokenizer.encode(s))))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidatedSamples {
    pub accepted: Vec<String>,
    pub rejected: usize,
}

/// Requests `samples` completions for `claim` and keeps the trie-valid ones.
pub fn generate_then_validate<T: Tokenizer + ?Sized>(
    model: &dyn CompletionModel,
    claim: &str,
    samples: usize,
    trie: &EntityTrie,
    tokenizer: &T,
) -> Result<ValidatedSamples, ClientError> {
    let mut out = ValidatedSamples::default();
    for text in model.complete(claim, samples)? {
        if spans_in_trie(&text, trie, tokenizer) {
            if !out.accepted.contains(&text) {
                out.accepted.push(text);
            }
        } else {
            out.rejected += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordTokenizer;

    struct Canned(Vec<String>);
    impl CompletionModel for Canned {
        fn complete(&self, _prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
            Ok(self.0.iter().take(n).cloned().collect())
        }
    }

    #[test]
    fn span_extraction() {
        assert_eq!(
            text_entity_spans("<e>A</e> || r || <e>B C</e>"),
            Some(vec!["A", "B C"])
        );
        assert_eq!(text_entity_spans("unknown_0 || r || x"), Some(vec![]));
        assert_eq!(text_entity_spans("<e>A || r"), None);
        assert_eq!(text_entity_spans("A</e>"), None);
        assert_eq!(text_entity_spans("<e>A<e>B</e>"), None);
    }

    #[test]
    fn keeps_only_trie_valid_samples() {
        let labels = ["Ajoblanco", "Garlic"];
        let tok = WordTokenizer::from_corpus(labels);
        let trie = EntityTrie::build(labels, &tok).unwrap();
        let model = Canned(vec![
            "<e>Ajoblanco</e> || ingredient || <e>Garlic</e>".into(),
            "<e>Ajoblanco</e> || ingredient || <e>Onion</e>".into(),
            "<e>Ajoblanco</e> || ingredient || <e>Garlic</e>".into(),
            "<e>Garlic".into(),
        ]);
        let out = generate_then_validate(&model, "claim", 4, &trie, &tok).unwrap();
        assert_eq!(out.accepted, vec!["<e>Ajoblanco</e> || ingredient || <e>Garlic</e>"]);
        assert_eq!(out.rejected, 2);
    }
}
