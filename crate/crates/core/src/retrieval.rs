//! Evidence retrieval: turns pseudo-subgraphs into sets of real KG triples.
//!
//! Incomplete triples (one unknown endpoint) are grouped by unknown. Each
//! group member `(e, r)` yields a candidate set: the neighbors of `e`, each
//! scored by its best-matching connecting relation. Candidates are then
//! re-scored globally (summed over the sets of the group) and every set
//! contributes its own top-k1 by global score. Complete triples are matched
//! against direct connections, or decomposed into two incomplete triples
//! sharing a fresh unknown when the endpoints are not connected.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};

use crate::kg::{
    split_inverse, toggle_inverse, Direction, Edge, EntityId, KnowledgeGraph, RelationId, Triple,
    DEFAULT_HUB_CAP,
};
use crate::pseudo_graph::{
    group_by_unknown, EntityRef, PseudoSubgraph, PseudoTriple, UnknownGroup, UnknownSide,
};
use crate::scoring::{RelationScorer, ScoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Candidates kept per candidate set.
    pub k1: usize,
    /// Connecting relations kept per complete triple.
    pub k2: usize,
    pub hub_cap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k1: 3,
            k2: 1,
            hub_cap: DEFAULT_HUB_CAP,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(format!("k1 and k2 must be positive (k1={}, k2={})", self.k1, self.k2));
        }
        if self.hub_cap == 0 {
            return Err("hub cap must be positive".into());
        }
        Ok(())
    }
}

/// A KG triple as shown to the reasoner. The relation may carry `~`, in
/// which case the stored fact is `(tail, relation without ~, head)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl EvidenceTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    /// The fact in stored orientation.
    pub fn stored(&self) -> Triple {
        match split_inverse(&self.relation) {
            (true, base) => Triple::new(&self.tail, base, &self.head),
            (false, base) => Triple::new(&self.head, base, &self.tail),
        }
    }

    /// The same fact displayed from the other endpoint.
    pub fn flipped(&self) -> Self {
        Self::new(&self.tail, toggle_inverse(&self.relation), &self.head)
    }
}

impl fmt::Display for EvidenceTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Insertion-ordered evidence, deduplicated on the stored fact. The first
/// display orientation seen for a fact is the one kept.
#[derive(Debug, Clone, Default)]
pub struct EvidenceSubgraph {
    triples: Vec<EvidenceTriple>,
    seen: HashSet<Triple>,
}

impl EvidenceSubgraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether the fact was new.
    pub fn insert(&mut self, t: EvidenceTriple) -> bool {
        if self.seen.insert(t.stored()) {
            self.triples.push(t);
            true
        } else {
            false
        }
    }

    pub fn extend<I: IntoIterator<Item = EvidenceTriple>>(&mut self, items: I) {
        for t in items {
            self.insert(t);
        }
    }

    pub fn merge(&mut self, other: EvidenceSubgraph) {
        self.extend(other.triples);
    }

    pub fn triples(&self) -> &[EvidenceTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains_fact(&self, t: &Triple) -> bool {
        self.seen.contains(t)
    }

    /// Stored facts, for set comparisons.
    pub fn facts(&self) -> &HashSet<Triple> {
        &self.seen
    }

    /// One `(head, relation, tail)` line per triple.
    pub fn to_text(&self) -> String {
        self.triples.iter().map(|t| format!("{t}\n")).collect()
    }
}

impl PartialEq for EvidenceSubgraph {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
    }
}

impl Serialize for EvidenceSubgraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.triples.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EvidenceSubgraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let triples = Vec::<EvidenceTriple>::deserialize(d)?;
        let mut out = EvidenceSubgraph::new();
        out.extend(triples);
        Ok(out)
    }
}

impl FromIterator<EvidenceTriple> for EvidenceSubgraph {
    fn from_iter<I: IntoIterator<Item = EvidenceTriple>>(iter: I) -> Self {
        let mut out = EvidenceSubgraph::new();
        out.extend(iter);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entity: EntityId,
    /// Best-scoring edge from the anchor to this candidate.
    pub edge: Edge,
    /// That edge's relation annotated from the anchor's side.
    pub relation: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub anchor: String,
    pub anchor_id: Option<EntityId>,
    pub query: String,
    /// Score desc, then entity label asc.
    pub candidates: Vec<Candidate>,
}

fn by_score_then_entity(a: (f64, EntityId), b: (f64, EntityId)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Scores each neighbor of `anchor` by the best similarity between `query`
/// and any relation (annotated from the anchor's side) linking them.
/// An anchor absent from the KG yields an empty set.
pub fn get_candidates_and_scores(
    kg: &KnowledgeGraph,
    anchor: &str,
    query: &str,
    scorer: &dyn RelationScorer,
    hub_cap: usize,
) -> Result<CandidateSet, ScoreError> {
    let anchor_id = kg.entity_id(anchor);
    let mut candidates: Vec<Candidate> = Vec::new();
    if let Some(a) = anchor_id {
        let mut rel_scores: HashMap<(RelationId, Direction), f64> = HashMap::new();
        let mut slot: HashMap<EntityId, usize> = HashMap::new();
        // Edges come sorted by annotated relation, so a strict improvement
        // test keeps the lexicographically smallest relation on ties.
        for edge in kg.edges(a, hub_cap) {
            let key = (edge.relation, edge.direction);
            let score = match rel_scores.get(&key) {
                Some(s) => *s,
                None => {
                    let s = scorer.sim(query, &kg.annotated_relation(edge.relation, edge.direction))?;
                    rel_scores.insert(key, s);
                    s
                }
            };
            match slot.get(&edge.entity) {
                Some(&i) => {
                    if score > candidates[i].score {
                        candidates[i].score = score;
                        candidates[i].edge = edge;
                        candidates[i].relation = kg.annotated_relation(edge.relation, edge.direction);
                    }
                }
                None => {
                    slot.insert(edge.entity, candidates.len());
                    candidates.push(Candidate {
                        entity: edge.entity,
                        edge,
                        relation: kg.annotated_relation(edge.relation, edge.direction),
                        score,
                    });
                }
            }
        }
        candidates.sort_by(|x, y| by_score_then_entity((x.score, x.entity), (y.score, y.entity)));
    }
    Ok(CandidateSet {
        anchor: anchor.to_string(),
        anchor_id,
        query: query.to_string(),
        candidates,
    })
}

/// Sum of per-set scores for every candidate, accumulated in set order.
pub fn aggregate_global_score(sets: &[CandidateSet]) -> HashMap<EntityId, f64> {
    let mut global: HashMap<EntityId, f64> = HashMap::new();
    for set in sets {
        for c in &set.candidates {
            *global.entry(c.entity).or_insert(0.0) += c.score;
        }
    }
    global
}

/// The top `k1` candidates of each set by global score (ties by entity
/// label), one list per set.
pub fn rank_top_k<'a>(
    sets: &'a [CandidateSet],
    global: &HashMap<EntityId, f64>,
    k1: usize,
) -> Vec<Vec<&'a Candidate>> {
    sets.iter()
        .map(|set| {
            let mut ranked: Vec<&Candidate> = set.candidates.iter().collect();
            ranked.sort_by(|x, y| {
                let gx = global.get(&x.entity).copied().unwrap_or(0.0);
                let gy = global.get(&y.entity).copied().unwrap_or(0.0);
                by_score_then_entity((gx, x.entity), (gy, y.entity))
            });
            ranked.truncate(k1);
            ranked
        })
        .collect()
}

/// What one candidate set contributed before the union.
#[derive(Debug, Clone, PartialEq)]
pub struct SetContribution {
    pub anchor: String,
    pub candidate_count: usize,
    pub selected: Vec<EvidenceTriple>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupTrace {
    pub unknown: u32,
    pub sets: Vec<SetContribution>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompleteTrace {
    pub triple: PseudoTriple,
    /// Empty when the triple was decomposed.
    pub matched: Vec<EvidenceTriple>,
    pub decomposed: bool,
}

/// Everything retrieval did, for diagnostics and contribution checks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalTrace {
    pub groups: Vec<GroupTrace>,
    pub complete: Vec<CompleteTrace>,
    /// Triples with two unknown endpoints.
    pub skipped_triples: Vec<PseudoTriple>,
    /// Group anchors missing from the KG.
    pub missing_anchors: Vec<String>,
}

impl RetrievalTrace {
    fn absorb(&mut self, other: RetrievalTrace) {
        self.groups.extend(other.groups);
        self.complete.extend(other.complete);
        self.skipped_triples.extend(other.skipped_triples);
        self.missing_anchors.extend(other.missing_anchors);
    }
}

fn retrieve_group(
    kg: &KnowledgeGraph,
    group: &UnknownGroup,
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
    trace: &mut RetrievalTrace,
) -> Result<Vec<EvidenceTriple>, ScoreError> {
    let mut sets = Vec::with_capacity(group.members.len());
    let mut sides = Vec::with_capacity(group.members.len());
    for m in &group.members {
        if !kg.contains_entity(&m.entity) {
            log::warn!("anchor {:?} of unknown_{} is not in the KG; skipped", m.entity, group.unknown);
            trace.missing_anchors.push(m.entity.clone());
            continue;
        }
        sets.push(get_candidates_and_scores(
            kg,
            &m.entity,
            &m.anchor_relation(),
            scorer,
            cfg.hub_cap,
        )?);
        sides.push(m.side);
    }
    let global = aggregate_global_score(&sets);
    let ranked = rank_top_k(&sets, &global, cfg.k1);
    let mut out = Vec::new();
    let mut contributions = Vec::with_capacity(sets.len());
    for ((set, picks), side) in sets.iter().zip(&ranked).zip(&sides) {
        let selected: Vec<EvidenceTriple> = picks
            .iter()
            .map(|c| {
                let t = EvidenceTriple::new(&set.anchor, &c.relation, kg.entity(c.entity));
                // Show the fact in the orientation the pseudo triple used.
                match side {
                    UnknownSide::Tail => t,
                    UnknownSide::Head => t.flipped(),
                }
            })
            .collect();
        out.extend(selected.iter().cloned());
        contributions.push(SetContribution {
            anchor: set.anchor.clone(),
            candidate_count: set.candidates.len(),
            selected,
        });
    }
    trace.groups.push(GroupTrace {
        unknown: group.unknown,
        sets: contributions,
    });
    Ok(out)
}

/// Incomplete-triple retrieval with a full trace.
pub fn retrieve_incomplete_traced(
    kg: &KnowledgeGraph,
    incomplete: &[PseudoTriple],
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<(EvidenceSubgraph, RetrievalTrace), ScoreError> {
    let grouping = group_by_unknown(incomplete);
    let mut trace = RetrievalTrace {
        skipped_triples: grouping.skipped,
        ..Default::default()
    };
    let mut evidence = EvidenceSubgraph::new();
    for group in &grouping.groups {
        evidence.extend(retrieve_group(kg, group, cfg, scorer, &mut trace)?);
    }
    Ok((evidence, trace))
}

pub fn retrieve_incomplete(
    kg: &KnowledgeGraph,
    incomplete: &[PseudoTriple],
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<EvidenceSubgraph, ScoreError> {
    Ok(retrieve_incomplete_traced(kg, incomplete, cfg, scorer)?.0)
}

/// Complete-triple retrieval. Decomposed triples take unknown indices
/// counting up from `first_fresh`.
pub fn retrieve_complete_traced(
    kg: &KnowledgeGraph,
    complete: &[PseudoTriple],
    first_fresh: u32,
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<(EvidenceSubgraph, RetrievalTrace), ScoreError> {
    let mut evidence = EvidenceSubgraph::new();
    let mut trace = RetrievalTrace::default();
    let mut fresh = first_fresh;
    for t in complete {
        let (Some(h), Some(tl)) = (t.head.as_known(), t.tail.as_known()) else {
            trace.skipped_triples.push(t.clone());
            continue;
        };
        let connected = kg.connected_relations(h, tl);
        if connected.is_empty() {
            let u = EntityRef::Unknown(fresh);
            fresh += 1;
            let parts = [
                PseudoTriple::new(t.head.clone(), t.relation.clone(), u.clone()),
                PseudoTriple::new(u, t.relation.clone(), t.tail.clone()),
            ];
            let (ev, sub) = retrieve_incomplete_traced(kg, &parts, cfg, scorer)?;
            evidence.merge(ev);
            trace.absorb(sub);
            trace.complete.push(CompleteTrace {
                triple: t.clone(),
                matched: Vec::new(),
                decomposed: true,
            });
            continue;
        }
        let mut scored = Vec::with_capacity(connected.len());
        for rel in connected {
            scored.push((scorer.sim(&t.relation, &rel)?, rel));
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        let matched: Vec<EvidenceTriple> = scored
            .into_iter()
            .take(cfg.k2)
            .map(|(_, rel)| EvidenceTriple::new(h, rel, tl))
            .collect();
        evidence.extend(matched.iter().cloned());
        trace.complete.push(CompleteTrace {
            triple: t.clone(),
            matched,
            decomposed: false,
        });
    }
    Ok((evidence, trace))
}

pub fn retrieve_complete(
    kg: &KnowledgeGraph,
    complete: &[PseudoTriple],
    first_fresh: u32,
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<EvidenceSubgraph, ScoreError> {
    Ok(retrieve_complete_traced(kg, complete, first_fresh, cfg, scorer)?.0)
}

/// Evidence for one pseudo-subgraph: incomplete triples first, then
/// complete ones.
pub fn retrieve_single_traced(
    kg: &KnowledgeGraph,
    graph: &PseudoSubgraph,
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<(EvidenceSubgraph, RetrievalTrace), ScoreError> {
    let (complete, incomplete) = graph.categorize();
    let (mut evidence, mut trace) = retrieve_incomplete_traced(kg, &incomplete, cfg, scorer)?;
    let fresh = graph.max_unknown().map_or(0, |m| m + 1);
    let (ev, sub) = retrieve_complete_traced(kg, &complete, fresh, cfg, scorer)?;
    evidence.merge(ev);
    trace.absorb(sub);
    Ok((evidence, trace))
}

/// Union of the evidence of every graph, in first-occurrence order.
pub fn retrieve_subgraph_traced(
    kg: &KnowledgeGraph,
    graphs: &[PseudoSubgraph],
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<(EvidenceSubgraph, RetrievalTrace), ScoreError> {
    let mut evidence = EvidenceSubgraph::new();
    let mut trace = RetrievalTrace::default();
    for g in graphs {
        let (ev, sub) = retrieve_single_traced(kg, g, cfg, scorer)?;
        evidence.merge(ev);
        trace.absorb(sub);
    }
    Ok((evidence, trace))
}

pub fn retrieve_subgraph(
    kg: &KnowledgeGraph,
    graphs: &[PseudoSubgraph],
    cfg: &RetrievalConfig,
    scorer: &dyn RelationScorer,
) -> Result<EvidenceSubgraph, ScoreError> {
    Ok(retrieve_subgraph_traced(kg, graphs, cfg, scorer)?.0)
}
