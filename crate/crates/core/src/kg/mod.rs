//! Read-only knowledge graph store.
//!
//! Labels are interned into dense ids assigned in lexicographic order, so
//! sorting by id is the same as sorting by label. Three indices are kept:
//! outgoing edges per head, incoming edges per tail, and the relations
//! linking an unordered entity pair. After [`KgBuilder::build`] the store is
//! immutable and can be shared across threads freely.

mod normalize;
mod snapshot;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

pub use normalize::{
    normalize_entity_label, normalize_label, normalize_relation, split_inverse, toggle_inverse,
    INVERSE_MARKER,
};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

/// Default cap on edges returned for a single entity.
pub const DEFAULT_HUB_CAP: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid triple: {0}")]
    InvalidTriple(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

/// Whether an edge is read in its stored direction or against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        }
    }
}

/// One edge seen from an anchor entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub relation: RelationId,
    pub direction: Direction,
    pub entity: EntityId,
}

/// A fact as plain labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// A stored fact as interned ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TripleId {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Compressed adjacency: `items[offsets[e]..offsets[e + 1]]` are the
/// `(relation, other)` pairs of entity `e`, sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Adjacency {
    offsets: Vec<u32>,
    items: Vec<(RelationId, EntityId)>,
}

impl Adjacency {
    fn build(entity_count: usize, mut pairs: Vec<(EntityId, RelationId, EntityId)>) -> Self {
        pairs.sort_unstable();
        let mut offsets = vec![0u32; entity_count + 1];
        for &(e, _, _) in &pairs {
            offsets[e.0 as usize + 1] += 1;
        }
        for i in 0..entity_count {
            offsets[i + 1] += offsets[i];
        }
        let items = pairs.into_iter().map(|(_, r, o)| (r, o)).collect();
        Self { offsets, items }
    }

    fn get(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        let i = e.0 as usize;
        if i + 1 >= self.offsets.len() {
            return &[];
        }
        &self.items[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    triples: Vec<TripleId>,
    by_head: Adjacency,
    by_tail: Adjacency,
    /// Keyed by `(min, max)` entity id; direction is relative to `min`.
    by_pair: HashMap<(EntityId, EntityId), Vec<(RelationId, Direction)>>,
}

impl KnowledgeGraph {
    /// Builds a graph directly from label triples, normalizing them.
    pub fn from_triples<I, S>(triples: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut builder = KgBuilder::default();
        for (h, r, t) in triples {
            builder.add(h.as_ref(), r.as_ref(), t.as_ref())?;
        }
        Ok(builder.build())
    }

    /// Assembles a graph from already sorted, deduplicated parts.
    fn from_parts(entities: Vec<String>, relations: Vec<String>, mut triples: Vec<TripleId>) -> Self {
        triples.sort_unstable();
        triples.dedup();
        let entity_ids = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), EntityId(i as u32)))
            .collect();
        let relation_ids = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), RelationId(i as u32)))
            .collect();
        let by_head = Adjacency::build(
            entities.len(),
            triples.iter().map(|t| (t.head, t.relation, t.tail)).collect(),
        );
        let by_tail = Adjacency::build(
            entities.len(),
            triples.iter().map(|t| (t.tail, t.relation, t.head)).collect(),
        );
        let mut by_pair: HashMap<(EntityId, EntityId), Vec<(RelationId, Direction)>> =
            HashMap::new();
        for t in &triples {
            let (key, dir) = if t.head <= t.tail {
                ((t.head, t.tail), Direction::Forward)
            } else {
                ((t.tail, t.head), Direction::Inverse)
            };
            by_pair.entry(key).or_default().push((t.relation, dir));
        }
        Self {
            entities,
            entity_ids,
            relations,
            relation_ids,
            triples,
            by_head,
            by_tail,
            by_pair,
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// Entity labels in ascending order.
    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    /// Relation labels in ascending order.
    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triple_ids(&self) -> &[TripleId] {
        &self.triples
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.triples.iter().map(|t| self.resolve(*t))
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_ids.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_ids.get(label).copied()
    }

    pub fn contains_entity(&self, label: &str) -> bool {
        self.entity_ids.contains_key(label)
    }

    pub fn entity(&self, id: EntityId) -> &str {
        &self.entities[id.0 as usize]
    }

    pub fn relation(&self, id: RelationId) -> &str {
        &self.relations[id.0 as usize]
    }

    pub fn resolve(&self, t: TripleId) -> Triple {
        Triple::new(self.entity(t.head), self.relation(t.relation), self.entity(t.tail))
    }

    /// Exact lookup of a stored fact.
    pub fn contains_triple(&self, head: &str, relation: &str, tail: &str) -> bool {
        match (self.entity_id(head), self.relation_id(relation), self.entity_id(tail)) {
            (Some(h), Some(r), Some(t)) => self
                .triples
                .binary_search(&TripleId {
                    head: h,
                    relation: r,
                    tail: t,
                })
                .is_ok(),
            _ => false,
        }
    }

    /// Relation label with `~` prepended for inverse edges.
    pub fn annotated_relation(&self, relation: RelationId, direction: Direction) -> String {
        let base = self.relation(relation);
        match direction {
            Direction::Forward => base.to_string(),
            Direction::Inverse => format!("{INVERSE_MARKER}{base}"),
        }
    }

    /// The stored triple an edge seen from `anchor` corresponds to.
    pub fn edge_triple(&self, anchor: EntityId, edge: Edge) -> TripleId {
        match edge.direction {
            Direction::Forward => TripleId {
                head: anchor,
                relation: edge.relation,
                tail: edge.entity,
            },
            Direction::Inverse => TripleId {
                head: edge.entity,
                relation: edge.relation,
                tail: anchor,
            },
        }
    }

    fn cmp_annotated(&self, a: &Edge, b: &Edge) -> Ordering {
        let key = |e: &Edge| {
            let marker: &[u8] = match e.direction {
                Direction::Forward => b"",
                Direction::Inverse => b"~",
            };
            marker.iter().chain(self.relation(e.relation).as_bytes()).copied()
        };
        key(a)
            .cmp(key(b))
            .then_with(|| a.entity.cmp(&b.entity))
    }

    /// All edges of `e` ordered by annotated relation then neighbor label,
    /// truncated to `cap`.
    pub fn edges(&self, e: EntityId, cap: usize) -> Vec<Edge> {
        let forward = self.by_head.get(e).iter().map(|&(r, o)| Edge {
            relation: r,
            direction: Direction::Forward,
            entity: o,
        });
        let inverse = self.by_tail.get(e).iter().map(|&(r, o)| Edge {
            relation: r,
            direction: Direction::Inverse,
            entity: o,
        });
        let mut all: Vec<Edge> = forward.chain(inverse).collect();
        all.sort_by(|a, b| self.cmp_annotated(a, b));
        all.truncate(cap);
        all
    }

    /// `(annotated relation, neighbor)` pairs of `entity`, capped at
    /// [`DEFAULT_HUB_CAP`]. Unknown entities have no neighbors.
    pub fn neighbors(&self, entity: &str) -> Vec<(String, String)> {
        self.neighbors_capped(entity, DEFAULT_HUB_CAP)
    }

    pub fn neighbors_capped(&self, entity: &str, cap: usize) -> Vec<(String, String)> {
        let Some(id) = self.entity_id(entity) else {
            return Vec::new();
        };
        self.edges(id, cap)
            .into_iter()
            .map(|edge| {
                (
                    self.annotated_relation(edge.relation, edge.direction),
                    self.entity(edge.entity).to_string(),
                )
            })
            .collect()
    }

    /// Relations linking `a` and `b`, direction relative to `a`.
    pub fn connecting_edges(&self, a: EntityId, b: EntityId) -> Vec<(RelationId, Direction)> {
        let (key, swapped) = if a <= b { ((a, b), false) } else { ((b, a), true) };
        let Some(list) = self.by_pair.get(&key) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(list.len() * 2);
        for &(r, dir) in list {
            let dir = if swapped { dir.flip() } else { dir };
            out.push((r, dir));
            if a == b {
                // A self-loop reads both ways from its only endpoint.
                out.push((r, dir.flip()));
            }
        }
        out.sort_by(|x, y| {
            self.annotated_relation(x.0, x.1)
                .cmp(&self.annotated_relation(y.0, y.1))
        });
        out.dedup();
        out
    }

    /// Annotated relations between `e1` and `e2`: plain for `e1 → e2`,
    /// `~`-prefixed for `e2 → e1`. Empty when the pair is not connected.
    pub fn connected_relations(&self, e1: &str, e2: &str) -> Vec<String> {
        match (self.entity_id(e1), self.entity_id(e2)) {
            (Some(a), Some(b)) => self
                .connecting_edges(a, b)
                .into_iter()
                .map(|(r, d)| self.annotated_relation(r, d))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Total number of entries across the head and tail indices.
    pub fn index_entry_count(&self) -> usize {
        self.by_head.items.len() + self.by_tail.items.len()
    }
}

/// Collects triples, normalizing and interning labels as they arrive.
#[derive(Debug, Default)]
pub struct KgBuilder {
    entity_tmp: HashMap<String, u32>,
    entity_labels: Vec<String>,
    relation_tmp: HashMap<String, u32>,
    relation_labels: Vec<String>,
    triples: Vec<[u32; 3]>,
}

impl KgBuilder {
    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> Result<(), KgError> {
        let h = normalize_entity_label(head);
        let r = normalize_label(relation);
        let t = normalize_entity_label(tail);
        if h.is_empty() || r.is_empty() || t.is_empty() {
            return Err(KgError::InvalidTriple(format!(
                "empty field in ({head:?}, {relation:?}, {tail:?})"
            )));
        }
        if r.starts_with(INVERSE_MARKER) {
            return Err(KgError::InvalidTriple(format!(
                "stored relation may not start with '{INVERSE_MARKER}': {r:?}"
            )));
        }
        let h = intern(&mut self.entity_tmp, &mut self.entity_labels, h);
        let r = intern(&mut self.relation_tmp, &mut self.relation_labels, r);
        let t = intern(&mut self.entity_tmp, &mut self.entity_labels, t);
        self.triples.push([h, r, t]);
        Ok(())
    }

    pub fn build(self) -> KnowledgeGraph {
        let (entities, entity_map) = sorted_remap(self.entity_labels);
        let (relations, relation_map) = sorted_remap(self.relation_labels);
        let triples = self
            .triples
            .into_iter()
            .map(|[h, r, t]| TripleId {
                head: EntityId(entity_map[h as usize]),
                relation: RelationId(relation_map[r as usize]),
                tail: EntityId(entity_map[t as usize]),
            })
            .collect();
        KnowledgeGraph::from_parts(entities, relations, triples)
    }
}

fn intern(map: &mut HashMap<String, u32>, labels: &mut Vec<String>, label: String) -> u32 {
    if let Some(&id) = map.get(&label) {
        return id;
    }
    let id = labels.len() as u32;
    labels.push(label.clone());
    map.insert(label, id);
    id
}

/// Sorts labels and returns them with a temp-id → sorted-id table.
fn sorted_remap(labels: Vec<String>) -> (Vec<String>, Vec<u32>) {
    let mut order: Vec<u32> = (0..labels.len() as u32).collect();
    order.sort_by(|&a, &b| labels[a as usize].cmp(&labels[b as usize]));
    let mut remap = vec![0u32; labels.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let mut slots: Vec<Option<String>> = labels.into_iter().map(Some).collect();
    let sorted = order
        .iter()
        .map(|&old| slots[old as usize].take().expect("each label moved once"))
        .collect();
    (sorted, remap)
}

/// Reads `head<TAB>relation<TAB>tail` lines. Lines starting with `#` and
/// blank lines are skipped.
pub fn load_kg<R: BufRead>(source: R) -> Result<KnowledgeGraph, KgError> {
    let mut builder = KgBuilder::default();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        builder
            .add(fields[0], fields[1], fields[2])
            .map_err(|e| KgError::Parse {
                line: line_no,
                message: match e {
                    KgError::InvalidTriple(m) => m,
                    other => other.to_string(),
                },
            })?;
    }
    Ok(builder.build())
}
