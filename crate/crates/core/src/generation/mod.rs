//! Pseudo-subgraph generation with entity-trie constrained decoding.
//!
//! Between an `<e>` token and its `</e>` the next-token distribution is
//! restricted to continuations the [`EntityTrie`] allows (plus `</e>` when
//! the span already spells a full entity). Outside entity spans the model's
//! distribution is used unchanged, which leaves relation wording free.

mod beam;
pub mod remote;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{TokenId, ENTITY_CLOSE, ENTITY_OPEN, EOS};
use crate::trie::EntityTrie;

pub use beam::{beam_decode, BeamOutput, Hypothesis};

/// Next-token distribution source.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Probability of every vocabulary token following `prompt ++ generated`.
    fn next_distribution(&self, prompt: &[TokenId], generated: &[TokenId]) -> Vec<f64>;

    /// `false` when the backend must be driven from one thread at a time.
    fn supports_concurrency(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub entity_open: TokenId,
    pub entity_close: TokenId,
    pub eos: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            entity_open: ENTITY_OPEN,
            entity_close: ENTITY_CLOSE,
            eos: EOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub beam_size: usize,
    pub max_length: usize,
    pub special: SpecialTokens,
    /// When set, tokens outside entity spans are sampled instead of taken
    /// greedily (or top-k in beam search), using this seed.
    pub sampling_seed: Option<u64>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_length: 256,
            special: SpecialTokens::default(),
            sampling_seed: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let s = self.special;
        if s.entity_open == s.entity_close || s.entity_open == s.eos || s.entity_close == s.eos {
            return Err(GenerationError::InvalidConfig(
                "special token ids must be distinct".into(),
            ));
        }
        if self.beam_size == 0 {
            return Err(GenerationError::InvalidConfig("beam size must be at least 1".into()));
        }
        if self.max_length == 0 {
            return Err(GenerationError::InvalidConfig("max length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("no allowed continuation inside an entity span")]
    DeadEnd { partial: Vec<TokenId> },
    #[error("max length reached inside an unclosed entity span")]
    Truncated { partial: Vec<TokenId> },
    #[error("claim is empty")]
    EmptyClaim,
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("language model returned {got} probabilities for a vocabulary of {expected}")]
    BadDistribution { expected: usize, got: usize },
}

/// The masked distribution has no mass left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("dead end: no allowed token carries probability mass")]
pub struct DeadEnd;

/// Tokens after the most recent `<e>` that has not been closed, or `None`
/// when no entity span is open.
pub fn open_entity_prefix(seq: &[TokenId], special: SpecialTokens) -> Option<&[TokenId]> {
    for (i, &t) in seq.iter().enumerate().rev() {
        if t == special.entity_close {
            return None;
        }
        if t == special.entity_open {
            return Some(&seq[i + 1..]);
        }
    }
    None
}

/// Tokens strictly after the last unclosed `<e>`; empty when none is open.
pub fn extract_prefix(seq: &[TokenId], special: SpecialTokens) -> &[TokenId] {
    open_entity_prefix(seq, special).unwrap_or(&[])
}

/// Token spans enclosed by `<e>` … `</e>`, in order.
pub fn entity_spans(seq: &[TokenId], special: SpecialTokens) -> Vec<&[TokenId]> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &t) in seq.iter().enumerate() {
        if t == special.entity_open {
            start = Some(i + 1);
        } else if t == special.entity_close {
            if let Some(s) = start.take() {
                spans.push(&seq[s..i]);
            }
        }
    }
    spans
}

/// Zeroes every entry outside `allowed` and renormalizes the rest.
pub fn mask_distribution(p: &[f64], allowed: &[TokenId]) -> Result<Vec<f64>, DeadEnd> {
    let mut out = vec![0.0; p.len()];
    let mut mass = 0.0;
    for &t in allowed {
        if let Some(&v) = p.get(t as usize) {
            if out[t as usize] == 0.0 && v > 0.0 {
                out[t as usize] = v;
                mass += v;
            }
        }
    }
    if mass <= 0.0 {
        return Err(DeadEnd);
    }
    for v in &mut out {
        *v /= mass;
    }
    Ok(out)
}

/// Applies the trie constraint to `p` if an entity span is open in
/// `generated`. Returns the distribution to pick from.
pub(crate) fn constrain(
    p: Vec<f64>,
    generated: &[TokenId],
    trie: &EntityTrie,
    special: SpecialTokens,
) -> Result<(Vec<f64>, bool), DeadEnd> {
    match open_entity_prefix(generated, special) {
        None => Ok((p, false)),
        Some(prefix) => {
            let look = trie.lookup(prefix);
            let mut allowed = look.allowed;
            if look.terminal {
                allowed.push(special.entity_close);
            }
            Ok((mask_distribution(&p, &allowed)?, true))
        }
    }
}

pub(crate) fn checked_distribution(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    generated: &[TokenId],
) -> Result<Vec<f64>, GenerationError> {
    let p = lm.next_distribution(prompt, generated);
    if p.len() != lm.vocab_size() {
        return Err(GenerationError::BadDistribution {
            expected: lm.vocab_size(),
            got: p.len(),
        });
    }
    Ok(p)
}

/// Highest-probability token; ties go to the lowest id.
pub(crate) fn argmax(p: &[f64]) -> Option<TokenId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as TokenId)
}

pub(crate) fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> Option<TokenId> {
    let total: f64 = p.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            last = Some(i as TokenId);
            if x < v {
                return last;
            }
            x -= v;
        }
    }
    last
}

/// Greedy decoding with the entity-trie constraint.
///
/// Stops at end-of-sequence or `max_length`. Hitting the length limit with an
/// entity span still open is an error carrying the partial output.
pub fn constrained_decode(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    trie: &EntityTrie,
    cfg: &DecoderConfig,
) -> Result<Vec<TokenId>, GenerationError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(GenerationError::EmptyClaim);
    }
    let mut rng = cfg.sampling_seed.map(ChaCha8Rng::seed_from_u64);
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < cfg.max_length {
        let p = checked_distribution(lm, prompt, &out)?;
        let (p, constrained) = constrain(p, &out, trie, cfg.special).map_err(|_| {
            GenerationError::DeadEnd {
                partial: out.clone(),
            }
        })?;
        let next = match rng.as_mut() {
            Some(rng) if !constrained => sample(&p, rng),
            _ => argmax(&p),
        };
        let Some(next) = next else {
            return Err(GenerationError::DeadEnd { partial: out });
        };
        out.push(next);
        if next == cfg.special.eos {
            return Ok(out);
        }
    }
    if open_entity_prefix(&out, cfg.special).is_some() {
        return Err(GenerationError::Truncated { partial: out });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SP: SpecialTokens = SpecialTokens {
        entity_open: 1,
        entity_close: 2,
        eos: 0,
    };

    #[test]
    fn prefix_after_open_span() {
        assert_eq!(extract_prefix(&[10, 1, 11, 12], SP), &[11, 12]);
        assert_eq!(extract_prefix(&[10, 1, 11, 2, 13], SP), &[] as &[TokenId]);
        assert_eq!(extract_prefix(&[], SP), &[] as &[TokenId]);
        assert_eq!(open_entity_prefix(&[10, 1], SP), Some(&[][..]));
        assert_eq!(open_entity_prefix(&[10], SP), None);
    }

    #[test]
    fn mask_renormalizes() {
        let p = [0.25; 4];
        assert_eq!(mask_distribution(&p, &[0, 1]).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(mask_distribution(&p, &[0, 1, 2, 3]).unwrap(), p.to_vec());
        assert_eq!(mask_distribution(&p, &[]), Err(DeadEnd));
        assert_eq!(mask_distribution(&[1.0, 0.0], &[1]), Err(DeadEnd));
    }

    #[test]
    fn spans_are_collected() {
        let seq = [1, 5, 6, 2, 7, 1, 8, 2, 0];
        assert_eq!(entity_spans(&seq, SP), vec![&[5, 6][..], &[8][..]]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DecoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.special.eos = cfg.special.entity_open;
        assert!(cfg.validate().is_err());
        let cfg = DecoderConfig {
            beam_size: 0,
            ..DecoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn stack_scan(seq: &[TokenId]) -> Vec<TokenId> {
        let mut open = false;
        let mut buf = Vec::new();
        for &t in seq {
            if t == SP.entity_open {
                open = true;
                buf.clear();
            } else if t == SP.entity_close {
                open = false;
                buf.clear();
            } else if open {
                buf.push(t);
            }
        }
        buf
    }

    proptest! {
        #[test]
        fn prefix_matches_stack_scan(seq in proptest::collection::vec(0u32..6, 0..40)) {
            prop_assert_eq!(extract_prefix(&seq, SP).to_vec(), stack_scan(&seq));
        }

        #[test]
        fn mask_matches_zero_then_normalize(
            raw in proptest::collection::vec(0.0f64..1.0, 1..16),
            allowed in proptest::collection::vec(0u32..16, 0..16),
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let mut zeroed = vec![0.0; p.len()];
            for &a in &allowed {
                if (a as usize) < p.len() {
                    zeroed[a as usize] = p[a as usize];
                }
            }
            let mass: f64 = zeroed.iter().sum();
            match mask_distribution(&p, &allowed) {
                Ok(m) => {
                    prop_assert!(mass > 0.0);
                    for (x, z) in m.iter().zip(&zeroed) {
                        prop_assert!((x - z / mass).abs() < 1e-12);
                    }
                    // Ratios among allowed tokens are unchanged.
                    let kept: Vec<usize> = (0..p.len()).filter(|&i| m[i] > 0.0).collect();
                    for w in kept.windows(2) {
                        let (a, b) = (w[0], w[1]);
                        prop_assert!((m[a] / m[b] - p[a] / p[b]).abs() < 1e-9 * (p[a] / p[b]).max(1.0));
                    }
                }
                Err(DeadEnd) => prop_assert!(mass <= 0.0),
            }
        }
    }
}
