//! Beam search where each hypothesis carries its own entity-span state.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{checked_distribution, constrain, open_entity_prefix, DecoderConfig, GenerationError, LanguageModel};
use crate::tokenizer::TokenId;
use crate::trie::EntityTrie;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities under the (masked) distributions.
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeamOutput {
    /// At most `beam_size` hypotheses, best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Hypotheses dropped at a dead end or left open at `max_length`.
    pub pruned: usize,
    pub diagnostic: Option<String>,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Up to `k` tokens with positive probability, most likely first.
fn top_k(p: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut picks: Vec<(TokenId, f64)> = p
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| (i as TokenId, *v))
        .collect();
    picks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    picks.truncate(k);
    picks
}

/// `k` distinct tokens drawn without replacement (Gumbel top-k).
fn sample_k(p: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<(TokenId, f64)> {
    let mut keyed: Vec<(f64, TokenId, f64)> = p
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, &v)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (v.ln() - (-u.ln()).ln(), i as TokenId, v)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, t, v)| (t, v)).collect()
}

/// Length-normalized beam search under the entity-trie constraint.
///
/// Hypotheses that hit a dead end inside an entity span are dropped; the
/// survivors fill the result list. With `beam_size == 1` this matches
/// [`super::constrained_decode`].
pub fn beam_decode(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    trie: &EntityTrie,
    cfg: &DecoderConfig,
) -> Result<BeamOutput, GenerationError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(GenerationError::EmptyClaim);
    }
    let width = cfg.beam_size;
    let eos = cfg.special.eos;
    let mut rng = cfg.sampling_seed.map(ChaCha8Rng::seed_from_u64);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut pruned = 0usize;

    for _ in 0..cfg.max_length {
        let mut candidates = Vec::new();
        for hyp in &alive {
            let p = checked_distribution(lm, prompt, &hyp.tokens)?;
            let Ok((p, constrained)) = constrain(p, &hyp.tokens, trie, cfg.special) else {
                pruned += 1;
                continue;
            };
            let picks = match rng.as_mut() {
                Some(rng) if !constrained => sample_k(&p, width, rng),
                _ => top_k(&p, width),
            };
            if picks.is_empty() {
                pruned += 1;
            }
            for (tok, prob) in picks {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + prob.ln(),
                });
            }
        }
        candidates.sort_by(rank);
        alive.clear();
        for (i, cand) in candidates.into_iter().enumerate() {
            if cand.tokens.last() == Some(&eos) {
                if i < width {
                    finished.push(cand);
                }
            } else if alive.len() < width {
                alive.push(cand);
            }
            if alive.len() == width && i + 1 >= width {
                break;
            }
        }
        if alive.is_empty() {
            break;
        }
        if finished.len() >= width {
            finished.sort_by(rank);
            finished.truncate(width);
            let worst = finished.last().map_or(f64::NEG_INFINITY, Hypothesis::score);
            if alive.iter().all(|h| h.score() < worst) {
                alive.clear();
                break;
            }
        }
    }
    // Hypotheses still running at max_length survive only if no entity span
    // is left open.
    for hyp in alive {
        if open_entity_prefix(&hyp.tokens, cfg.special).is_some() {
            pruned += 1;
        } else {
            finished.push(hyp);
        }
    }
    finished.sort_by(rank);
    finished.truncate(width);
    let diagnostic = finished
        .is_empty()
        .then(|| format!("all beams dead-ended ({pruned} pruned)"));
    Ok(BeamOutput {
        hypotheses: finished,
        pruned,
        diagnostic,
    })
}
