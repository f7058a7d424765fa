//! Training-pair construction for the pseudo-subgraph generator.
//!
//! Each record carries a claim, its entity list and multi-hop evidence
//! paths. Paths are cut into single-hop triples joined by `unknown_<i>`
//! placeholders, entities the claim does not mention are replaced by
//! placeholders too, and the triples are shuffled without disturbing the
//! order in which placeholders first appear.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::kg::{normalize_entity_label, normalize_relation};
use crate::pseudo_graph::{parse_pseudo_subgraph, EntityRef, PseudoSubgraph, PseudoTriple};
use crate::reasoning::{ChatModel, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("evidence path {head:?} -> {tail:?} has no relations")]
    EmptyPath { head: String, tail: String },
    #[error("generated label failed its own round-trip: {0}")]
    Internal(String),
    #[error("record {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `head, (r1, r2, …), tail` as given by the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(String, Vec<String>, String)", into = "(String, Vec<String>, String)")]
pub struct EvidencePath {
    pub head: String,
    pub relations: Vec<String>,
    pub tail: String,
}

impl From<(String, Vec<String>, String)> for EvidencePath {
    fn from((head, relations, tail): (String, Vec<String>, String)) -> Self {
        Self { head, relations, tail }
    }
}

impl From<EvidencePath> for (String, Vec<String>, String) {
    fn from(p: EvidencePath) -> Self {
        (p.head, p.relations, p.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default)]
    pub evidence: Vec<EvidencePath>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input: String,
    pub label: String,
}

/// Chains a path through fresh unknowns starting at `next_unknown`.
/// Returns the triples and the next free index.
pub fn decompose_path(
    path: &EvidencePath,
    next_unknown: u32,
) -> Result<(Vec<PseudoTriple>, u32), AnnotationError> {
    if path.relations.is_empty() {
        return Err(AnnotationError::EmptyPath {
            head: path.head.clone(),
            tail: path.tail.clone(),
        });
    }
    let mut next = next_unknown;
    let mut out = Vec::with_capacity(path.relations.len());
    let mut current = EntityRef::Known(normalize_entity_label(&path.head));
    let last = path.relations.len() - 1;
    for (i, r) in path.relations.iter().enumerate() {
        let target = if i == last {
            EntityRef::Known(normalize_entity_label(&path.tail))
        } else {
            next += 1;
            EntityRef::Unknown(next - 1)
        };
        out.push(PseudoTriple::new(current, normalize_relation(r), target.clone()));
        current = target;
    }
    Ok((out, next))
}

/// Decomposes all paths. Paths leaving the same head through the same
/// leading relations share their intermediate unknowns, and repeated
/// triples are kept once.
pub fn decompose_paths(paths: &[EvidencePath]) -> Result<Vec<PseudoTriple>, AnnotationError> {
    let mut shared: HashMap<(String, Vec<String>), u32> = HashMap::new();
    let mut next = 0u32;
    let mut out: Vec<PseudoTriple> = Vec::new();
    for path in paths {
        if path.relations.is_empty() {
            return Err(AnnotationError::EmptyPath {
                head: path.head.clone(),
                tail: path.tail.clone(),
            });
        }
        let head = normalize_entity_label(&path.head);
        let rels: Vec<String> = path.relations.iter().map(|r| normalize_relation(r)).collect();
        let mut current = EntityRef::Known(head.clone());
        for i in 0..rels.len() {
            let target = if i + 1 == rels.len() {
                EntityRef::Known(normalize_entity_label(&path.tail))
            } else {
                let idx = *shared.entry((head.clone(), rels[..=i].to_vec())).or_insert_with(|| {
                    next += 1;
                    next - 1
                });
                EntityRef::Unknown(idx)
            };
            let t = PseudoTriple::new(current, rels[i].clone(), target.clone());
            if !out.contains(&t) {
                out.push(t);
            }
            current = target;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassifiedEntities {
    pub in_claim: Vec<String>,
    pub out_of_claim: Vec<String>,
    pub diagnostic: Option<String>,
}

pub enum EntityClassifier<'a> {
    /// Case-insensitive substring test on normalized labels.
    Offline,
    /// A chat model prompted with the in/out entity template.
    Remote(&'a dyn ChatModel),
}

/// `Twilight (band)` → `Twilight`; labels without a trailing qualifier are
/// returned unchanged.
fn strip_qualifier(label: &str) -> &str {
    let t = label.trim_end();
    if t.ends_with(')') {
        if let Some(open) = t.rfind('(') {
            let base = t[..open].trim_end();
            if !base.is_empty() {
                return base;
            }
        }
    }
    t
}

pub fn mentioned_in_claim(claim: &str, entity: &str) -> bool {
    let claim = normalize_entity_label(claim).to_lowercase();
    let label = normalize_entity_label(entity).to_lowercase();
    if label.is_empty() {
        return false;
    }
    claim.contains(&label) || claim.contains(strip_qualifier(&label))
}

fn classify_offline(claim: &str, entities: &[String]) -> ClassifiedEntities {
    let (in_claim, out_of_claim) = entities
        .iter()
        .cloned()
        .partition(|e| mentioned_in_claim(claim, e));
    ClassifiedEntities {
        in_claim,
        out_of_claim,
        diagnostic: None,
    }
}

const ENTITY_PROMPT: &str = r#"Task: Specify if the following entities are mentioned in the claim or not.
Respond correctly in the following JSON format and do not output anything else:
{
  "in_entities": [list of entities that are in the claim],
  "out_entities": [list of entities that are not in the claim]
}
Do not change the entity names from the list of provided entities.
Claim: {{claim}}
Entities: {{entities}}"#;

pub fn build_entity_prompt(claim: &str, entities: &[String]) -> String {
    ENTITY_PROMPT
        .replace("{{claim}}", claim)
        .replace("{{entities}}", &format!("[{}]", entities.join(", ")))
}

fn string_set(v: &Value) -> Option<HashSet<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(normalize_entity_label))
        .collect()
}

fn classify_remote(model: &dyn ChatModel, claim: &str, entities: &[String]) -> Result<ClassifiedEntities, String> {
    let raw = model.chat(&build_entity_prompt(claim, entities)).map_err(|e| e.to_string())?;
    let start = raw.find('{').ok_or("no JSON object in response")?;
    let obj: Value = serde_json::Deserializer::from_str(&raw[start..])
        .into_iter::<Value>()
        .next()
        .ok_or("empty response")?
        .map_err(|e| e.to_string())?;
    let ins = obj.get("in_entities").and_then(string_set).ok_or("missing in_entities")?;
    let outs = obj.get("out_entities").and_then(string_set).ok_or("missing out_entities")?;
    let mut result = ClassifiedEntities::default();
    for e in entities {
        let key = normalize_entity_label(e);
        let inside = if outs.contains(&key) && !ins.contains(&key) {
            false
        } else if ins.contains(&key) {
            true
        } else {
            // Not mentioned in the answer at all.
            mentioned_in_claim(claim, e)
        };
        if inside {
            result.in_claim.push(e.clone());
        } else {
            result.out_of_claim.push(e.clone());
        }
    }
    Ok(result)
}

/// Splits `entities` into those the claim mentions and those it does not.
/// A failing remote classifier falls back to the offline matcher.
pub fn classify_entities(claim: &str, entities: &[String], classifier: &EntityClassifier<'_>) -> ClassifiedEntities {
    if entities.is_empty() {
        return ClassifiedEntities::default();
    }
    match classifier {
        EntityClassifier::Offline => classify_offline(claim, entities),
        EntityClassifier::Remote(model) => match classify_remote(*model, claim, entities) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("remote entity classification failed ({e}); using offline matcher");
                ClassifiedEntities {
                    diagnostic: Some(format!("remote classifier failed: {e}")),
                    ..classify_offline(claim, entities)
                }
            }
        },
    }
}

/// Reorders triples at random while keeping the first appearances of
/// unknown indices ascending (`0, 1, 2, …`). `triples` must already be in
/// canonical order. `None` keeps the input order.
pub fn constrained_shuffle(triples: &[PseudoTriple], seed: Option<u64>) -> Vec<PseudoTriple> {
    let Some(seed) = seed else {
        return triples.to_vec();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<&PseudoTriple> = triples.iter().collect();
    let mut introduced = 0u32;
    let mut out = Vec::with_capacity(triples.len());
    while !remaining.is_empty() {
        let eligible: Vec<usize> = (0..remaining.len())
            .filter(|&i| {
                let mut expect = introduced;
                for e in [&remaining[i].head, &remaining[i].tail] {
                    if let Some(u) = e.as_unknown() {
                        if u == expect {
                            expect += 1;
                        } else if u > expect {
                            return false;
                        }
                    }
                }
                true
            })
            .collect();
        // The first remaining triple of a canonical list is always eligible.
        let pick = eligible[rng.random_range(0..eligible.len())];
        let t = remaining.remove(pick);
        for e in [&t.head, &t.tail] {
            if e.as_unknown() == Some(introduced) {
                introduced += 1;
            }
        }
        out.push(t.clone());
    }
    out
}

/// Whether unknown indices first appear as `0, 1, 2, …` in line order.
pub fn unknowns_in_first_use_order(triples: &[PseudoTriple]) -> bool {
    let mut next = 0u32;
    for t in triples {
        for e in [&t.head, &t.tail] {
            if let Some(u) = e.as_unknown() {
                if u == next {
                    next += 1;
                } else if u > next {
                    return false;
                }
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationReport {
    pub out_of_claim: Vec<String>,
    /// Triples dropped because both endpoints became the same placeholder.
    pub dropped: usize,
    pub diagnostic: Option<String>,
}

/// Full pipeline for one record.
pub fn build_training_example(
    record: &AnnotationRecord,
    classifier: &EntityClassifier<'_>,
    seed: Option<u64>,
) -> Result<(TrainingExample, AnnotationReport), AnnotationError> {
    let triples = decompose_paths(&record.evidence)?;
    let classes = classify_entities(&record.claim, &record.entities, classifier);
    let out_labels: HashSet<String> = classes
        .out_of_claim
        .iter()
        .map(|e| normalize_entity_label(e))
        .collect();
    let mut next = triples
        .iter()
        .flat_map(|t| [&t.head, &t.tail])
        .filter_map(EntityRef::as_unknown)
        .max()
        .map_or(0, |m| m + 1);
    let mut placeholder: HashMap<String, u32> = HashMap::new();
    let mut substitute = |e: &EntityRef| match e {
        EntityRef::Known(l) if out_labels.contains(l) => EntityRef::Unknown(*placeholder.entry(l.clone()).or_insert_with(|| {
            next += 1;
            next - 1
        })),
        other => other.clone(),
    };
    let mut report = AnnotationReport {
        out_of_claim: classes.out_of_claim.clone(),
        diagnostic: classes.diagnostic,
        ..Default::default()
    };
    let mut substituted: Vec<PseudoTriple> = Vec::with_capacity(triples.len());
    for t in &triples {
        let head = substitute(&t.head);
        let tail = substitute(&t.tail);
        if head.as_unknown().is_some() && head == tail {
            report.dropped += 1;
            continue;
        }
        let t = PseudoTriple::new(head, t.relation.clone(), tail);
        if !substituted.contains(&t) {
            substituted.push(t);
        }
    }
    let canonical = PseudoSubgraph::new(substituted).canonicalize();
    let shuffled = PseudoSubgraph::new(constrained_shuffle(&canonical.triples, seed));
    let label = shuffled.to_text();
    let reparsed = parse_pseudo_subgraph(&label, None).map_err(|e| AnnotationError::Internal(e.to_string()))?;
    if reparsed.to_text() != label || !reparsed.is_canonical() {
        return Err(AnnotationError::Internal(format!("label is not stable: {label:?}")));
    }
    Ok((
        TrainingExample {
            input: record.claim.clone(),
            label,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotateStats {
    pub written: usize,
    pub skipped: usize,
}

/// Reads records as JSONL and writes one `{"input","label"}` line each.
/// Record `i` (0-based) is shuffled with `seed + i`.
pub fn annotate_jsonl<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    classifier: &EntityClassifier<'_>,
    seed: Option<u64>,
) -> Result<AnnotateStats, AnnotationError> {
    let mut stats = AnnotateStats::default();
    let mut index = 0u64;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("record {}: {e}", n + 1);
                stats.skipped += 1;
                continue;
            }
        };
        match build_training_example(&record, classifier, seed.map(|s| s.wrapping_add(index))) {
            Ok((example, _)) => {
                serde_json::to_writer(&mut output, &example).map_err(|e| AnnotationError::Record {
                    line: n + 1,
                    message: e.to_string(),
                })?;
                output.write_all(b"\n")?;
                stats.written += 1;
            }
            Err(e) => {
                log::warn!("record {}: {e}", n + 1);
                stats.skipped += 1;
            }
        }
        index += 1;
    }
    output.flush()?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::ScriptedChat;
    use proptest::prelude::*;

    pub(crate) fn twilight() -> AnnotationRecord {
        serde_json::from_str(
            r#"{"claim": "A musical artist, whose music is Post-metal, played with the band Twilight and performs for Mamiffer.",
                "entities": ["Mamiffer", "Post-metal", "Twilight_(band)"],
                "evidence": [["Twilight_(band)", ["~associatedMusicalArtist", "associatedBand"], "Mamiffer"],
                             ["Twilight_(band)", ["~associatedMusicalArtist", "genre"], "Post-metal"]]}"#,
        )
        .unwrap()
    }

    const TWILIGHT_LABEL: &str = "<e>Twilight (band)</e> || ~associated musical artist || unknown_0\n\
                        unknown_0 || associated band || <e>Mamiffer</e>\n\
                        unknown_0 || genre || <e>Post-metal</e>";

    #[test]
    fn twilight_path_decomposes_into_shared_unknown() {
        let (triples, next) = decompose_path(&twilight().evidence[0], 0).unwrap();
        let text = PseudoSubgraph::new(triples).to_text();
        assert_eq!(
            text,
            "<e>Twilight (band)</e> || ~associated musical artist || unknown_0\n\
             unknown_0 || associated band || <e>Mamiffer</e>"
        );
        assert_eq!(next, 1);
    }

    #[test]
    fn single_hop_is_complete() {
        let p = EvidencePath::from(("A".to_string(), vec!["r".to_string()], "B".to_string()));
        let (t, next) = decompose_path(&p, 4).unwrap();
        assert_eq!(t, vec![PseudoTriple::new(EntityRef::known("A"), "r", EntityRef::known("B"))]);
        assert_eq!(next, 4);
        let empty = EvidencePath::from(("A".to_string(), vec![], "B".to_string()));
        assert!(matches!(decompose_path(&empty, 0), Err(AnnotationError::EmptyPath { .. })));
    }

    #[test]
    fn twilight_identity_shuffle_gives_label() {
        let (ex, report) = build_training_example(&twilight(), &EntityClassifier::Offline, None).unwrap();
        assert_eq!(ex.label, TWILIGHT_LABEL);
        assert!(report.out_of_claim.is_empty());
    }

    #[test]
    fn offline_classifier_examples() {
        let twilight = twilight();
        let c = classify_entities(&twilight.claim, &twilight.entities, &EntityClassifier::Offline);
        assert_eq!(c.in_claim.len(), 3);
        let c = classify_entities(
            "He is a Rhythm and Blues singer from Errata, Mississippi!",
            &["Rhythm and blues".into(), "Errata, Mississippi".into(), "Bo Diddley".into()],
            &EntityClassifier::Offline,
        );
        assert_eq!(c.out_of_claim, vec!["Bo Diddley"]);
        assert_eq!(classify_entities("x", &[], &EntityClassifier::Offline), ClassifiedEntities::default());
    }

    #[test]
    fn out_of_claim_entities_become_unknowns() {
        let record: AnnotationRecord = serde_json::from_str(
            r#"{"claim": "He is a Rhythm and Blues singer from Errata, Mississippi!",
                "entities": ["Rhythm_and_blues", "Errata,_Mississippi", "Bo_Diddley"],
                "evidence": [["Bo_Diddley", ["genre"], "Rhythm_and_blues"],
                             ["Bo_Diddley", ["birthPlace"], "Errata,_Mississippi"]]}"#,
        )
        .unwrap();
        let (ex, report) = build_training_example(&record, &EntityClassifier::Offline, None).unwrap();
        assert_eq!(
            ex.label,
            "unknown_0 || genre || <e>Rhythm and blues</e>\nunknown_0 || birth place || <e>Errata, Mississippi</e>"
        );
        assert_eq!(report.out_of_claim, vec!["Bo_Diddley"]);
    }

    #[test]
    fn remote_classifier_and_fallback() {
        let chat = ScriptedChat::default().otherwise(r#"{"in_entities": ["Mamiffer"], "out_entities": ["Post-metal", "Twilight_(band)"]}"#);
        let twilight = twilight();
        let c = classify_entities(&twilight.claim, &twilight.entities, &EntityClassifier::Remote(&chat));
        assert_eq!(c.in_claim, vec!["Mamiffer"]);
        assert_eq!(c.out_of_claim.len(), 2);
        let broken = ScriptedChat::default().otherwise("no idea");
        let c = classify_entities(&twilight.claim, &twilight.entities, &EntityClassifier::Remote(&broken));
        assert_eq!(c.in_claim.len(), 3);
        assert!(c.diagnostic.is_some());
        let p = build_entity_prompt("C", &twilight.entities);
        assert!(p.ends_with("Claim: C\nEntities: [Mamiffer, Post-metal, Twilight_(band)]"));
    }

    #[test]
    fn jsonl_round() {
        let line = serde_json::to_string(&twilight()).unwrap();
        let input = format!("{line}\nnot json\n\n{line}\n");
        let mut out = Vec::new();
        let stats = annotate_jsonl(input.as_bytes(), &mut out, &EntityClassifier::Offline, None).unwrap();
        assert_eq!(stats, AnnotateStats { written: 2, skipped: 1 });
        let first: TrainingExample = serde_json::from_str(String::from_utf8(out).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first.label, TWILIGHT_LABEL);
    }

    fn chain_oracle(path: &EvidencePath, triples: &[PseudoTriple]) -> bool {
        let n = path.relations.len();
        triples.len() == n
            && triples[0].head == EntityRef::Known(normalize_entity_label(&path.head))
            && triples[n - 1].tail == EntityRef::Known(normalize_entity_label(&path.tail))
            && triples.windows(2).all(|w| w[0].tail == w[1].head && w[0].tail.as_unknown().is_some())
    }

    fn arb_path() -> impl Strategy<Value = EvidencePath> {
        ("[A-Z][a-z]{1,5}", proptest::collection::vec("~?[a-z]{1,4}([A-Z][a-z]{1,3})?", 1..5), "[A-Z][a-z]{1,5}")
            .prop_map(|(h, r, t)| EvidencePath { head: h, relations: r, tail: t })
    }

    proptest! {
        #[test]
        fn chains_conserve_endpoints(path in arb_path(), start in 0u32..5) {
            let (triples, next) = decompose_path(&path, start).unwrap();
            prop_assert!(chain_oracle(&path, &triples));
            prop_assert_eq!(next, start + path.relations.len() as u32 - 1);
        }

        #[test]
        fn shuffle_keeps_multiset_and_unknown_order(paths in proptest::collection::vec(arb_path(), 1..5), seed in any::<u64>()) {
            let canonical = PseudoSubgraph::new(decompose_paths(&paths).unwrap()).canonicalize();
            let shuffled = constrained_shuffle(&canonical.triples, Some(seed));
            let mut a = canonical.triples.clone();
            let mut b = shuffled.clone();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(unknowns_in_first_use_order(&shuffled));
        }
    }
}
