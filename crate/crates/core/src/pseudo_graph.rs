//! Pseudo-subgraphs: a claim's hypothesized triples, one per line as
//! `head || relation || tail`, where endpoints are `<e>label</e>` or
//! `unknown_<i>` placeholders.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::kg::{normalize_entity_label, normalize_relation, KnowledgeGraph};
use crate::tokenizer::{ENTITY_CLOSE_TEXT, ENTITY_OPEN_TEXT};

pub const FIELD_SEPARATOR: &str = " || ";
const UNKNOWN_PREFIX: &str = "unknown_";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityRef {
    Known(String),
    Unknown(u32),
}

impl EntityRef {
    pub fn known(label: impl Into<String>) -> Self {
        EntityRef::Known(label.into())
    }

    pub fn as_known(&self) -> Option<&str> {
        match self {
            EntityRef::Known(s) => Some(s),
            EntityRef::Unknown(_) => None,
        }
    }

    pub fn as_unknown(&self) -> Option<u32> {
        match self {
            EntityRef::Unknown(i) => Some(*i),
            EntityRef::Known(_) => None,
        }
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityRef::Known(s) => write!(f, "{ENTITY_OPEN_TEXT}{s}{ENTITY_CLOSE_TEXT}"),
            EntityRef::Unknown(i) => write!(f, "{UNKNOWN_PREFIX}{i}"),
        }
    }
}

// JSON form: known entities are plain strings, unknowns are {"unknown": i}.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EntityRefRepr {
    Known(String),
    Unknown { unknown: u32 },
}

impl Serialize for EntityRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            EntityRef::Known(l) => EntityRefRepr::Known(l.clone()),
            EntityRef::Unknown(i) => EntityRefRepr::Unknown { unknown: *i },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EntityRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match EntityRefRepr::deserialize(d)? {
            EntityRefRepr::Known(l) if l.is_empty() => {
                return Err(D::Error::custom("empty entity label"))
            }
            EntityRefRepr::Known(l) => EntityRef::Known(l),
            EntityRefRepr::Unknown { unknown } => EntityRef::Unknown(unknown),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PseudoTriple {
    pub head: EntityRef,
    pub relation: String,
    pub tail: EntityRef,
}

impl PseudoTriple {
    pub fn new(head: EntityRef, relation: impl Into<String>, tail: EntityRef) -> Self {
        Self {
            head,
            relation: relation.into(),
            tail,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.head.as_unknown().is_none() && self.tail.as_unknown().is_none()
    }
}

impl fmt::Display for PseudoTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{FIELD_SEPARATOR}{}{FIELD_SEPARATOR}{}", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoSubgraph {
    pub triples: Vec<PseudoTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_score: Option<f64>,
}

impl fmt::Display for PseudoSubgraph {
    /// The raw line format, without a trailing newline.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.triples.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PseudoGraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: entity {entity:?} is not in the knowledge graph")]
    UnknownEntity { line: usize, entity: String },
}

fn parse_error(line: usize, message: impl Into<String>) -> PseudoGraphError {
    PseudoGraphError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_entity(field: &str, line: usize) -> Result<EntityRef, PseudoGraphError> {
    if let Some(inner) = field
        .strip_prefix(ENTITY_OPEN_TEXT)
        .and_then(|f| f.strip_suffix(ENTITY_CLOSE_TEXT))
    {
        if inner.contains(ENTITY_OPEN_TEXT) || inner.contains(ENTITY_CLOSE_TEXT) {
            return Err(parse_error(line, format!("nested entity markers in {field:?}")));
        }
        let label = normalize_entity_label(inner);
        if label.is_empty() {
            return Err(parse_error(line, "empty entity span"));
        }
        return Ok(EntityRef::Known(label));
    }
    if let Some(rest) = field.strip_prefix("unknown") {
        let idx = rest
            .strip_prefix('_')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse::<u32>().ok())
            .ok_or_else(|| parse_error(line, format!("malformed unknown token {field:?}")))?;
        return Ok(EntityRef::Unknown(idx));
    }
    Err(parse_error(
        line,
        format!("endpoint {field:?} must be <e>label</e> or unknown_<i>"),
    ))
}

/// Parses the line format. When `kg` is given, every known entity must exist
/// in it. Blank lines are ignored.
pub fn parse_pseudo_subgraph(
    text: &str,
    kg: Option<&KnowledgeGraph>,
) -> Result<PseudoSubgraph, PseudoGraphError> {
    let mut triples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split("||").map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_error(
                line,
                format!("expected 3 fields separated by \"||\", found {}", fields.len()),
            ));
        }
        let head = parse_entity(fields[0], line)?;
        let tail = parse_entity(fields[2], line)?;
        let relation = normalize_relation(fields[1]);
        if relation.is_empty() || relation == "~" {
            return Err(parse_error(line, "empty relation"));
        }
        if relation.contains(ENTITY_OPEN_TEXT) || relation.contains(ENTITY_CLOSE_TEXT) {
            return Err(parse_error(line, "entity marker inside relation"));
        }
        if let (Some(a), Some(b)) = (head.as_unknown(), tail.as_unknown()) {
            if a == b {
                return Err(parse_error(line, format!("unknown_{a} on both sides")));
            }
        }
        if let Some(kg) = kg {
            for e in [&head, &tail] {
                if let Some(label) = e.as_known() {
                    if !kg.contains_entity(label) {
                        return Err(PseudoGraphError::UnknownEntity {
                            line,
                            entity: label.to_string(),
                        });
                    }
                }
            }
        }
        triples.push(PseudoTriple { head, relation, tail });
    }
    Ok(PseudoSubgraph {
        triples,
        beam_score: None,
    })
}

impl PseudoSubgraph {
    pub fn new(triples: Vec<PseudoTriple>) -> Self {
        Self {
            triples,
            beam_score: None,
        }
    }

    /// Raw line format.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    /// Distinct known entity labels.
    pub fn known_entities(&self) -> BTreeSet<&str> {
        self.triples
            .iter()
            .flat_map(|t| [&t.head, &t.tail])
            .filter_map(EntityRef::as_known)
            .collect()
    }

    /// Known entities absent from `kg`.
    pub fn missing_entities(&self, kg: &KnowledgeGraph) -> Vec<String> {
        self.known_entities()
            .into_iter()
            .filter(|e| !kg.contains_entity(e))
            .map(str::to_string)
            .collect()
    }

    pub fn max_unknown(&self) -> Option<u32> {
        self.triples
            .iter()
            .flat_map(|t| [&t.head, &t.tail])
            .filter_map(EntityRef::as_unknown)
            .max()
    }

    /// Splits into `(complete, incomplete)`, each in input order.
    pub fn categorize(&self) -> (Vec<PseudoTriple>, Vec<PseudoTriple>) {
        self.triples.iter().cloned().partition(PseudoTriple::is_complete)
    }

    /// Renumbers unknowns by first appearance (head before tail, line by
    /// line) to `0, 1, 2, …`.
    pub fn canonicalize(&self) -> PseudoSubgraph {
        let mut map: HashMap<u32, u32> = HashMap::new();
        let mut renumber = |e: &EntityRef| match e {
            EntityRef::Unknown(i) => {
                let next = map.len() as u32;
                EntityRef::Unknown(*map.entry(*i).or_insert(next))
            }
            known => known.clone(),
        };
        let triples = self
            .triples
            .iter()
            .map(|t| {
                let head = renumber(&t.head);
                let tail = renumber(&t.tail);
                PseudoTriple {
                    head,
                    relation: t.relation.clone(),
                    tail,
                }
            })
            .collect();
        PseudoSubgraph {
            triples,
            beam_score: self.beam_score,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.canonicalize().triples == self.triples
    }
}

pub fn canonicalize_unknown_indices(p: &PseudoSubgraph) -> PseudoSubgraph {
    p.canonicalize()
}

/// Which side of a pseudo triple the unknown sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnknownSide {
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMember {
    pub entity: String,
    /// The pseudo relation exactly as written in the triple.
    pub relation: String,
    pub side: UnknownSide,
}

impl GroupMember {
    /// The relation read from the known entity towards the unknown: verbatim
    /// when the unknown is the tail, with `~` toggled when it is the head.
    pub fn anchor_relation(&self) -> String {
        match self.side {
            UnknownSide::Tail => self.relation.clone(),
            UnknownSide::Head => crate::kg::toggle_inverse(&self.relation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownGroup {
    pub unknown: u32,
    pub members: Vec<GroupMember>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Grouping {
    pub groups: Vec<UnknownGroup>,
    /// Triples that fit no group: two unknown endpoints, or none.
    pub skipped: Vec<PseudoTriple>,
}

/// Buckets single-unknown triples by their unknown index, ordered by index.
pub fn group_by_unknown(incomplete: &[PseudoTriple]) -> Grouping {
    let mut buckets: BTreeMap<u32, Vec<GroupMember>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for t in incomplete {
        let (u, entity, side) = match (&t.head, &t.tail) {
            (EntityRef::Unknown(u), EntityRef::Known(e)) => (*u, e, UnknownSide::Head),
            (EntityRef::Known(e), EntityRef::Unknown(u)) => (*u, e, UnknownSide::Tail),
            _ => {
                log::warn!("skipping triple without exactly one unknown endpoint: {t}");
                skipped.push(t.clone());
                continue;
            }
        };
        buckets.entry(u).or_default().push(GroupMember {
            entity: entity.clone(),
            relation: t.relation.clone(),
            side,
        });
    }
    Grouping {
        groups: buckets
            .into_iter()
            .map(|(unknown, members)| UnknownGroup { unknown, members })
            .collect(),
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(s: &str) -> EntityRef {
        EntityRef::known(s)
    }

    fn twilight() -> PseudoSubgraph {
        parse_pseudo_subgraph(
            "<e>Twilight (band)</e> || ~associated musical artist || unknown_0\n\
             unknown_0 || associated band || <e>Mamiffer</e>\n\
             unknown_0 || genre || <e>Post-metal</e>",
            None,
        )
        .unwrap()
    }

    #[test]
    fn parses_known_entities() {
        let g = parse_pseudo_subgraph("<e>Ajoblanco</e> || ingredient || <e>Garlic</e>", None).unwrap();
        assert_eq!(g.triples, vec![PseudoTriple::new(k("Ajoblanco"), "ingredient", k("Garlic"))]);
    }

    #[test]
    fn parses_unknowns() {
        let g = parse_pseudo_subgraph("unknown_0 || genre || <e>Post-metal</e>", None).unwrap();
        assert_eq!(
            g.triples,
            vec![PseudoTriple::new(EntityRef::Unknown(0), "genre", k("Post-metal"))]
        );
    }

    #[test]
    fn arity_errors_carry_line() {
        assert_eq!(
            parse_pseudo_subgraph("<e>a</e> || b", None),
            Err(PseudoGraphError::Parse {
                line: 1,
                message: "expected 3 fields separated by \"||\", found 2".into()
            })
        );
        let err = parse_pseudo_subgraph("<e>a</e> || r || <e>b</e>\na || b", None).unwrap_err();
        assert!(matches!(err, PseudoGraphError::Parse { line: 2, .. }));
    }

    #[test]
    fn malformed_unknowns_and_bare_labels_fail() {
        for bad in [
            "unknown_x || r || <e>a</e>",
            "unknown_ || r || <e>a</e>",
            "unknown || r || <e>a</e>",
            "bare || r || <e>a</e>",
            "<e></e> || r || <e>a</e>",
            "unknown_1 || r || unknown_1",
            "<e>a</e> ||  || <e>b</e>",
        ] {
            assert!(parse_pseudo_subgraph(bad, None).is_err(), "{bad}");
        }
    }

    #[test]
    fn validates_against_kg() {
        let kg = KnowledgeGraph::from_triples([("Ajoblanco", "ingredient", "Garlic")]).unwrap();
        assert!(parse_pseudo_subgraph("<e>Ajoblanco</e> || ingredient || <e>Garlic</e>", Some(&kg)).is_ok());
        assert_eq!(
            parse_pseudo_subgraph("<e>Ajoblanco</e> || ingredient || <e>Onion</e>", Some(&kg)),
            Err(PseudoGraphError::UnknownEntity {
                line: 1,
                entity: "Onion".into()
            })
        );
    }

    #[test]
    fn serializes_to_line_format() {
        let text = "<e>Twilight (band)</e> || ~associated musical artist || unknown_0\n\
                    unknown_0 || associated band || <e>Mamiffer</e>\n\
                    unknown_0 || genre || <e>Post-metal</e>";
        assert_eq!(twilight().to_text(), text);
    }

    #[test]
    fn json_shape() {
        let g = parse_pseudo_subgraph("unknown_0 || genre || <e>Post-metal</e>", None).unwrap();
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"triples": [{"head": {"unknown": 0}, "relation": "genre", "tail": "Post-metal"}]})
        );
        let back: PseudoSubgraph = serde_json::from_value(v).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn twilight_is_all_incomplete_in_one_group() {
        let (complete, incomplete) = twilight().categorize();
        assert!(complete.is_empty());
        assert_eq!(incomplete.len(), 3);
        let grouping = group_by_unknown(&incomplete);
        assert_eq!(grouping.groups.len(), 1);
        let g = &grouping.groups[0];
        assert_eq!(g.unknown, 0);
        let entities: Vec<&str> = g.members.iter().map(|m| m.entity.as_str()).collect();
        assert_eq!(entities, vec!["Twilight (band)", "Mamiffer", "Post-metal"]);
        assert_eq!(g.members[0].anchor_relation(), "~associated musical artist");
        assert_eq!(g.members[1].anchor_relation(), "~associated band");
    }

    #[test]
    fn complete_triples_categorize_as_complete() {
        let g = parse_pseudo_subgraph("<e>a</e> || r || <e>b</e>\n<e>b</e> || s || <e>c</e>", None).unwrap();
        let (c, i) = g.categorize();
        assert_eq!((c.len(), i.len()), (2, 0));
    }

    #[test]
    fn double_unknown_is_skipped() {
        let t = PseudoTriple::new(EntityRef::Unknown(0), "r", EntityRef::Unknown(1));
        let grouping = group_by_unknown(std::slice::from_ref(&t));
        assert!(grouping.groups.is_empty());
        assert_eq!(grouping.skipped, vec![t]);
    }

    #[test]
    fn canonical_renumbering() {
        let g = PseudoSubgraph::new(vec![
            PseudoTriple::new(EntityRef::Unknown(5), "r", k("a")),
            PseudoTriple::new(k("b"), "s", EntityRef::Unknown(5)),
            PseudoTriple::new(EntityRef::Unknown(7), "t", k("c")),
        ]);
        let c = g.canonicalize();
        let idx: Vec<u32> = c
            .triples
            .iter()
            .flat_map(|t| [t.head.as_unknown(), t.tail.as_unknown()])
            .flatten()
            .collect();
        assert_eq!(idx, vec![0, 0, 1]);
        assert_eq!(c.canonicalize(), c);
        assert!(twilight().is_canonical());
    }

    fn arb_ref() -> impl Strategy<Value = EntityRef> {
        prop_oneof![
            "[A-Z][a-z]{0,5}( [a-z]{1,4})?".prop_map(EntityRef::Known),
            (0u32..4).prop_map(EntityRef::Unknown),
        ]
    }

    fn arb_graph() -> impl Strategy<Value = PseudoSubgraph> {
        proptest::collection::vec(
            (arb_ref(), "~?[a-z]{1,6}( [a-z]{1,5})?", arb_ref()),
            0..7,
        )
        .prop_map(|ts| {
            PseudoSubgraph::new(
                ts.into_iter()
                    .filter(|(h, _, t)| !(h.as_unknown().is_some() && h == t))
                    .map(|(h, r, t)| PseudoTriple::new(h, r, t))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(g in arb_graph()) {
            let back = parse_pseudo_subgraph(&g.to_text(), None).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn categorize_partitions(g in arb_graph()) {
            let (c, i) = g.categorize();
            prop_assert_eq!(c.len() + i.len(), g.triples.len());
            prop_assert!(c.iter().all(|t| t.is_complete()));
            prop_assert!(i.iter().all(|t| !t.is_complete()));
            let grouping = group_by_unknown(&i);
            let grouped: usize = grouping.groups.iter().map(|g| g.members.len()).sum();
            prop_assert_eq!(grouped + grouping.skipped.len(), i.len());
        }

        #[test]
        fn grouping_matches_bucket_scan(g in arb_graph()) {
            let (_, inc) = g.categorize();
            let grouping = group_by_unknown(&inc);
            for u in 0..4u32 {
                let expected: Vec<(String, String)> = inc
                    .iter()
                    .filter_map(|t| match (&t.head, &t.tail) {
                        (EntityRef::Unknown(x), EntityRef::Known(e)) if *x == u => Some((e.clone(), t.relation.clone())),
                        (EntityRef::Known(e), EntityRef::Unknown(x)) if *x == u => Some((e.clone(), t.relation.clone())),
                        _ => None,
                    })
                    .collect();
                let got: Vec<(String, String)> = grouping
                    .groups
                    .iter()
                    .filter(|g| g.unknown == u)
                    .flat_map(|g| g.members.iter().map(|m| (m.entity.clone(), m.relation.clone())))
                    .collect();
                prop_assert_eq!(got, expected);
            }
        }

        #[test]
        fn canonical_form_ignores_index_labels(g in arb_graph(), shift in 1u32..50) {
            // Relabel every unknown with a bijection; canonical forms agree.
            let relabeled = PseudoSubgraph::new(
                g.triples
                    .iter()
                    .map(|t| {
                        let f = |e: &EntityRef| match e {
                            EntityRef::Unknown(i) => EntityRef::Unknown(100 - i + shift),
                            k => k.clone(),
                        };
                        PseudoTriple::new(f(&t.head), t.relation.clone(), f(&t.tail))
                    })
                    .collect(),
            );
            prop_assert_eq!(relabeled.canonicalize(), g.canonicalize());
            prop_assert!(g.canonicalize().is_canonical());
        }
    }
}
