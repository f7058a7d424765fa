use std::collections::BTreeSet;

use kgclaim::generation::{beam_decode, constrained_decode, entity_spans, DecoderConfig, GenerationError, LanguageModel};
use kgclaim::mock::MockLm;
use kgclaim::tokenizer::{TokenId, Tokenizer, WordTokenizer, ENTITY_CLOSE, ENTITY_OPEN, EOS};
use kgclaim::trie::EntityTrie;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWILIGHT_ENTITIES: [&str; 3] = ["Twilight (band)", "Mamiffer", "Post-metal"];

fn setup(labels: &[&str]) -> (WordTokenizer, EntityTrie) {
    let tok = WordTokenizer::from_corpus(labels.iter().copied().chain(["genre", "claim"]));
    let trie = EntityTrie::build(labels, &tok).unwrap();
    (tok, trie)
}

fn cfg(beam: usize) -> DecoderConfig {
    DecoderConfig {
        beam_size: beam,
        max_length: 64,
        ..DecoderConfig::default()
    }
}

fn with_eos(mut v: Vec<TokenId>) -> Vec<TokenId> {
    v.push(EOS);
    v
}

#[test]
fn new_prefix_branches_to_york_and_jersey() {
    let (tok, trie) = setup(&["new york", "new jersey"]);
    let look = trie.lookup(&tok.encode("new"));
    let expected: BTreeSet<TokenId> = [tok.piece_id(" york").unwrap(), tok.piece_id(" jersey").unwrap()].into();
    assert_eq!(look.allowed.into_iter().collect::<BTreeSet<_>>(), expected);
    assert!(!look.terminal);
}

#[test]
fn ten_thousand_labels_membership() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: BTreeSet<String> = (0..10_000)
        .map(|_| {
            let words = rng.random_range(1..4);
            (0..words)
                .map(|_| {
                    let len = rng.random_range(2..7);
                    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let tok = WordTokenizer::from_corpus(&labels);
    let trie = EntityTrie::build(&labels, &tok).unwrap();
    let members: BTreeSet<Vec<TokenId>> = labels.iter().map(|l| tok.encode(l)).collect();
    for l in &labels {
        assert!(trie.contains(&tok.encode(l)));
    }
    let total_tokens: usize = members.iter().map(Vec::len).sum();
    assert!(trie.node_count() <= total_tokens + 1);
    for _ in 0..5_000 {
        let len = rng.random_range(1..5);
        let seq: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..tok.vocab_size() as TokenId)).collect();
        assert_eq!(trie.contains(&seq), members.contains(&seq));
    }
}

fn linear_scan(members: &[Vec<TokenId>], prefix: &[TokenId]) -> (BTreeSet<TokenId>, bool) {
    let mut allowed = BTreeSet::new();
    let mut terminal = false;
    for m in members {
        if m.starts_with(prefix) {
            if m.len() == prefix.len() {
                terminal = true;
            } else {
                allowed.insert(m[prefix.len()]);
            }
        }
    }
    (allowed, terminal)
}

proptest! {
    #[test]
    fn lookup_matches_linear_scan(
        members in proptest::collection::vec(proptest::collection::vec(3u32..8, 1..5), 0..20),
        prefix in proptest::collection::vec(3u32..8, 0..5),
    ) {
        let trie = EntityTrie::from_sequences(members.clone());
        let look = trie.lookup(&prefix);
        let (allowed, terminal) = linear_scan(&members, &prefix);
        prop_assert_eq!(look.allowed.into_iter().collect::<BTreeSet<_>>(), allowed);
        prop_assert_eq!(look.terminal, terminal);
    }

    #[test]
    fn every_member_is_reachable(members in proptest::collection::vec(proptest::collection::vec(3u32..8, 1..5), 1..20)) {
        let trie = EntityTrie::from_sequences(members.clone());
        for m in &members {
            for i in 0..m.len() {
                prop_assert!(trie.lookup(&m[..i]).allowed.contains(&m[i]));
            }
            prop_assert!(trie.lookup(m).terminal);
        }
    }
}

#[test]
fn scripted_twilight_line_decodes_exactly() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let target = with_eos(tok.encode_with_markers("<e>Twilight (band)</e> || genre || <e>Post-metal</e>"));
    let lm = MockLm::new(tok.vocab_size(), EOS).script(&[], &target, 1.0);
    let prompt = tok.encode("claim");
    let out = constrained_decode(&lm, &prompt, &trie, &cfg(1)).unwrap();
    assert_eq!(out, target);
    let spans = entity_spans(&out, DecoderConfig::default().special);
    assert_eq!(spans.len(), 2);
    assert!(spans.iter().all(|s| trie.contains(s)));
    assert_eq!(tok.decode(spans[0]), "Twilight (band)");
}

#[test]
fn off_lexicon_token_after_open_dead_ends() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let stray = tok.piece_id("genre").unwrap();
    let lm = MockLm::new(tok.vocab_size(), EOS).script(&[], &[ENTITY_OPEN, stray, ENTITY_CLOSE, EOS], 1.0);
    let prompt = tok.encode("claim");
    assert!(matches!(
        constrained_decode(&lm, &prompt, &trie, &cfg(1)),
        Err(GenerationError::DeadEnd { partial }) if partial == vec![ENTITY_OPEN]
    ));
    let beams = beam_decode(&lm, &prompt, &trie, &cfg(3)).unwrap();
    assert!(beams.hypotheses.is_empty());
    assert!(beams.pruned > 0);
    assert!(beams.diagnostic.is_some());
}

#[test]
fn truncation_with_open_span_is_an_error() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let target = with_eos(tok.encode_with_markers("<e>Twilight (band)</e>"));
    let lm = MockLm::new(tok.vocab_size(), EOS).script(&[], &target, 1.0);
    let short = DecoderConfig {
        max_length: 2,
        ..cfg(1)
    };
    assert!(matches!(
        constrained_decode(&lm, &tok.encode("claim"), &trie, &short),
        Err(GenerationError::Truncated { .. })
    ));
}

fn unconstrained_greedy(lm: &dyn LanguageModel, prompt: &[TokenId], max: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    while out.len() < max {
        let p = lm.next_distribution(prompt, &out);
        let mut best = 0;
        for i in 0..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        out.push(best as TokenId);
        if best as TokenId == EOS {
            break;
        }
    }
    out
}

#[test]
fn without_entity_spans_matches_unconstrained_greedy() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let text = with_eos(tok.encode("unknown_0 || genre || unknown_1"));
    let lm = MockLm::new(tok.vocab_size(), EOS)
        .script(&[], &text, 1.0)
        .with_smoothing(0.05);
    let prompt = tok.encode("claim");
    let out = constrained_decode(&lm, &prompt, &trie, &cfg(1)).unwrap();
    assert_eq!(out, unconstrained_greedy(&lm, &prompt, 64));
    assert_eq!(out, text);
}

#[test]
fn beam_of_one_is_greedy() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let a = with_eos(tok.encode_with_markers("<e>Mamiffer</e> || genre || <e>Post-metal</e>"));
    let b = with_eos(tok.encode_with_markers("<e>Twilight (band)</e> || genre || <e>Post-metal</e>"));
    let lm = MockLm::new(tok.vocab_size(), EOS).script(&[], &a, 2.0).script(&[], &b, 1.0);
    let prompt = tok.encode("claim");
    let greedy = constrained_decode(&lm, &prompt, &trie, &cfg(1)).unwrap();
    let beams = beam_decode(&lm, &prompt, &trie, &cfg(1)).unwrap();
    assert_eq!(beams.hypotheses.len(), 1);
    assert_eq!(beams.hypotheses[0].tokens, greedy);
}

#[test]
fn two_equal_branches_both_returned() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let a = with_eos(tok.encode_with_markers("<e>Mamiffer</e> || genre || <e>Post-metal</e>"));
    let b = with_eos(tok.encode_with_markers("<e>Twilight (band)</e> || genre || <e>Post-metal</e>"));
    let lm = MockLm::new(tok.vocab_size(), EOS).script(&[], &a, 1.0).script(&[], &b, 1.0);
    let beams = beam_decode(&lm, &tok.encode("claim"), &trie, &cfg(2)).unwrap();
    let got: BTreeSet<Vec<TokenId>> = beams.hypotheses.iter().map(|h| h.tokens.clone()).collect();
    assert_eq!(got, BTreeSet::from([a, b]));
}

#[test]
fn beam_returns_exactly_the_completable_paths() {
    let (tok, trie) = setup(&TWILIGHT_ENTITIES);
    let paths: Vec<Vec<TokenId>> = [
        "<e>Mamiffer</e> || genre || <e>Post-metal</e>",
        "<e>Twilight (band)</e> || genre || <e>Post-metal</e>",
        "unknown_0 || genre || <e>Mamiffer</e>",
    ]
    .iter()
    .map(|s| with_eos(tok.encode_with_markers(s)))
    .collect();
    let mut lm = MockLm::new(tok.vocab_size(), EOS);
    for (i, p) in paths.iter().enumerate() {
        lm.add_script(&[], p, 1.0 + i as f64);
    }
    let beams = beam_decode(&lm, &tok.encode("claim"), &trie, &cfg(5)).unwrap();
    assert_eq!(beams.hypotheses.len(), 3);
    let got: BTreeSet<Vec<TokenId>> = beams.hypotheses.iter().map(|h| h.tokens.clone()).collect();
    assert_eq!(got, paths.into_iter().collect());
    for w in beams.hypotheses.windows(2) {
        assert!(w[0].score() >= w[1].score());
    }
}

fn random_lm(tok: &WordTokenizer, seed: u64) -> MockLm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = tok.vocab_size() as TokenId;
    let mut lm = MockLm::new(tok.vocab_size(), EOS).with_smoothing(0.2);
    for _ in 0..20 {
        let ctx: Vec<TokenId> = vec![rng.random_range(0..vocab)];
        let weights = (0..4)
            .map(|_| (rng.random_range(0..vocab), rng.random_range(0.1..1.0)))
            .chain([(ENTITY_OPEN, 0.5), (ENTITY_CLOSE, 0.5), (EOS, 0.3)])
            .collect();
        lm = lm.rule(ctx, weights);
    }
    lm.rule(vec![], vec![(ENTITY_OPEN, 1.0), (EOS, 0.2)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn beams_are_sound_sorted_and_reproducible(seed in any::<u64>(), beam in 1usize..5, sampling in proptest::option::of(any::<u64>())) {
        let (tok, trie) = setup(&TWILIGHT_ENTITIES);
        let lm = random_lm(&tok, seed);
        let c = DecoderConfig { beam_size: beam, max_length: 24, sampling_seed: sampling, ..DecoderConfig::default() };
        let prompt = tok.encode("claim");
        let first = beam_decode(&lm, &prompt, &trie, &c).unwrap();
        let again = beam_decode(&lm, &prompt, &trie, &c).unwrap();
        prop_assert_eq!(&first, &again);
        prop_assert!(first.hypotheses.len() <= beam);
        for h in &first.hypotheses {
            for span in entity_spans(&h.tokens, c.special) {
                prop_assert!(trie.contains(span));
            }
        }
        for w in first.hypotheses.windows(2) {
            prop_assert!(w[0].score() >= w[1].score());
        }
    }
}
