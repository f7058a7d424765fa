//! Relation similarity backends: exact match, normalized Levenshtein, and
//! dot products of unit-norm embeddings.
//!
//! Inputs are expected to be normalized already (the KG and the pseudo-graph
//! parser both normalize). Inverse markers are compared verbatim.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde_json::json;

use crate::http::{ClientError, JsonClient};
use crate::kg::{KnowledgeGraph, INVERSE_MARKER};

pub const RELATION_INDEX_MAGIC: &[u8; 8] = b"KGCREL\0\0";
pub const RELATION_INDEX_VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("relation index snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<ClientError> for ScoreError {
    fn from(e: ClientError) -> Self {
        ScoreError::Provider(e.to_string())
    }
}

pub trait RelationScorer: Send + Sync {
    /// Similarity of the pseudo relation `query` to the KG-side `relation`.
    fn sim(&self, query: &str, relation: &str) -> Result<f64, ScoreError>;
}

pub fn sim_exact(a: &str, b: &str) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

/// `1 - lev(a, b) / max(|a|, |b|)` over chars; 1 when both are empty.
pub fn sim_fuzzy(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExactScorer;

impl RelationScorer for ExactScorer {
    fn sim(&self, query: &str, relation: &str) -> Result<f64, ScoreError> {
        Ok(sim_exact(query, relation))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FuzzyScorer;

impl RelationScorer for FuzzyScorer {
    fn sim(&self, query: &str, relation: &str) -> Result<f64, ScoreError> {
        Ok(sim_fuzzy(query, relation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScorerKind {
    Exact,
    Fuzzy,
    Embedding,
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(ScorerKind::Exact),
            "fuzzy" => Ok(ScorerKind::Fuzzy),
            "embedding" => Ok(ScorerKind::Embedding),
            other => Err(format!("unknown scorer {other:?} (expected exact, fuzzy or embedding)")),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Exact => "exact",
            ScorerKind::Fuzzy => "fuzzy",
            ScorerKind::Embedding => "embedding",
        })
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// One unit-norm vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ScoreError>;
}

/// Scales `v` to unit L2 norm; zero vectors are left as they are.
pub fn normalize_vector(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Offline provider: character trigrams of the padded string hashed into
/// `dim` signed buckets. Deterministic and dependency-free; useful for tests
/// and for running the embedding path without a service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let chars: Vec<char> = format!("  {text}  ").chars().collect();
        for w in chars.windows(3) {
            let gram: String = w.iter().collect();
            let h = fnv1a(gram.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if (h >> 63) == 0 { 1.0 } else { -1.0 };
        }
        normalize_vector(&mut v);
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ScoreError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-embeddings-compatible HTTP provider.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    client: JsonClient,
    dim: usize,
}

impl HttpEmbeddingProvider {
    /// `dim` is checked against every returned vector.
    pub fn new(client: JsonClient, dim: usize) -> Self {
        Self { client, dim }
    }

    /// Embeds a probe string to learn the dimension.
    pub fn probe(client: JsonClient) -> Result<Self, ScoreError> {
        let mut p = Self { client, dim: 0 };
        let v = p.request(&["probe".to_string()])?;
        p.dim = v.first().map_or(0, Vec::len);
        if p.dim == 0 {
            return Err(ScoreError::Provider("empty embedding".into()));
        }
        Ok(p)
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ScoreError> {
        let body = json!({"input": texts, "model": self.client.settings().model});
        let resp = self.client.post("embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| ScoreError::Provider("response without data".into()))?;
        if data.len() != texts.len() {
            return Err(ScoreError::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                let values = item
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| ScoreError::Provider("item without embedding".into()))?;
                let mut v = values
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<Vec<f32>>>()
                    .ok_or_else(|| ScoreError::Provider("non-numeric embedding".into()))?;
                normalize_vector(&mut v);
                Ok(v)
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ScoreError> {
        let out = self.request(texts)?;
        for v in &out {
            if v.len() != self.dim {
                return Err(ScoreError::Dimension {
                    expected: self.dim,
                    got: v.len(),
                });
            }
        }
        Ok(out)
    }
}

/// Precomputed embeddings for every KG relation in both orientations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelationIndex {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl RelationIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Embeds `r` and `~r` for every relation in `kg`, `batch` strings per
    /// provider call.
    pub fn build(
        kg: &KnowledgeGraph,
        provider: &dyn EmbeddingProvider,
        batch: usize,
    ) -> Result<Self, ScoreError> {
        let mut names: Vec<String> = Vec::with_capacity(kg.relation_count() * 2);
        for r in kg.relations() {
            names.push(r.clone());
            names.push(format!("{INVERSE_MARKER}{r}"));
        }
        let mut index = Self::new(provider.dim());
        for chunk in names.chunks(batch.max(1)) {
            let vectors = provider.embed(chunk)?;
            for (name, v) in chunk.iter().zip(vectors) {
                index.insert(name.clone(), v)?;
            }
        }
        Ok(index)
    }

    pub fn insert(&mut self, relation: String, vector: Vec<f32>) -> Result<(), ScoreError> {
        if vector.len() != self.dim {
            return Err(ScoreError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.vectors.insert(relation, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, relation: &str) -> Option<&[f32]> {
        self.vectors.get(relation).map(Vec::as_slice)
    }

    /// Writes the index with records sorted by relation string.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<(), ScoreError> {
        out.write_all(RELATION_INDEX_MAGIC)?;
        out.write_all(&RELATION_INDEX_VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.vectors.len() as u64).to_le_bytes())?;
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            out.write_all(&(k.len() as u32).to_le_bytes())?;
            out.write_all(k.as_bytes())?;
            for x in &self.vectors[k] {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self, ScoreError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != RELATION_INDEX_MAGIC {
            return Err(ScoreError::Snapshot("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != RELATION_INDEX_VERSION {
            return Err(ScoreError::Snapshot(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut input)? as usize;
        let mut count_buf = [0u8; 8];
        input.read_exact(&mut count_buf)?;
        let count = u64::from_le_bytes(count_buf);
        let mut index = Self::new(dim);
        for _ in 0..count {
            let len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ScoreError::Snapshot("relation is not UTF-8".into()))?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                input.read_exact(&mut b)?;
                v.push(f32::from_le_bytes(b));
            }
            index.vectors.insert(name, v);
        }
        Ok(index)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, ScoreError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// What the embedding scorer does when the provider fails.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FallbackPolicy {
    #[default]
    Fuzzy,
    Fail,
}

pub struct EmbeddingScorer {
    index: Arc<RelationIndex>,
    provider: Arc<dyn EmbeddingProvider>,
    fallback: FallbackPolicy,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl EmbeddingScorer {
    pub fn new(
        index: Arc<RelationIndex>,
        provider: Arc<dyn EmbeddingProvider>,
        fallback: FallbackPolicy,
    ) -> Self {
        Self {
            index,
            provider,
            fallback,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn vector(&self, text: &str) -> Result<Vec<f32>, ScoreError> {
        if let Some(v) = self.index.get(text) {
            return Ok(v.to_vec());
        }
        if let Some(v) = self.cache.lock().expect("embedding cache poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = self
            .provider
            .embed(&[text.to_string()])?
            .pop()
            .ok_or_else(|| ScoreError::Provider("empty response".into()))?;
        if v.len() != self.index.dim() {
            return Err(ScoreError::Dimension {
                expected: self.index.dim(),
                got: v.len(),
            });
        }
        self.cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }

    fn raw_sim(&self, query: &str, relation: &str) -> Result<f64, ScoreError> {
        let q = self.vector(query)?;
        let r = self.vector(relation)?;
        Ok(dot(&q, &r))
    }

    /// Scores `query` against each relation, embedding `query` once.
    pub fn sim_many(&self, query: &str, relations: &[&str]) -> Result<Vec<f64>, ScoreError> {
        relations.iter().map(|r| self.sim(query, r)).collect()
    }
}

impl RelationScorer for EmbeddingScorer {
    fn sim(&self, query: &str, relation: &str) -> Result<f64, ScoreError> {
        match self.raw_sim(query, relation) {
            Ok(s) => Ok(s.clamp(-1.0, 1.0)),
            Err(e) => match self.fallback {
                FallbackPolicy::Fail => Err(e),
                FallbackPolicy::Fuzzy => {
                    log::warn!("embedding scoring failed ({e}); falling back to fuzzy");
                    Ok(sim_fuzzy(query, relation))
                }
            },
        }
    }
}

/// Whether `v` has unit norm within tolerance.
pub fn is_unit(v: &[f32]) -> bool {
    (dot(v, v).sqrt() - 1.0).abs() <= UNIT_TOLERANCE
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lev_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn exact_examples() {
        assert_eq!(sim_exact("genre", "genre"), 1.0);
        assert_eq!(sim_exact("genre", "writer"), 0.0);
        assert_eq!(sim_exact("~genre", "genre"), 0.0);
    }

    #[test]
    fn fuzzy_examples() {
        assert_eq!(lev_oracle("kitten", "sitting"), 3);
        assert!((sim_fuzzy("kitten", "sitting") - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(sim_fuzzy("genre", "genre"), 1.0);
        assert_eq!(sim_fuzzy("", "abc"), 0.0);
        assert_eq!(sim_fuzzy("", ""), 1.0);
    }

    #[test]
    fn scorer_kind_parses() {
        assert_eq!("Fuzzy".parse::<ScorerKind>(), Ok(ScorerKind::Fuzzy));
        assert!("rerank".parse::<ScorerKind>().is_err());
    }

    struct Stub(HashMap<String, Vec<f32>>);
    impl EmbeddingProvider for Stub {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ScoreError> {
            texts
                .iter()
                .map(|t| self.0.get(t).cloned().ok_or_else(|| ScoreError::Provider(format!("no vector for {t}"))))
                .collect()
        }
    }

    fn stub() -> Arc<Stub> {
        Arc::new(Stub(HashMap::from([
            ("genre".to_string(), vec![1.0, 0.0]),
            ("~genre".to_string(), vec![0.0, 1.0]),
            ("style".to_string(), vec![1.0, 0.0]),
        ])))
    }

    #[test]
    fn embedding_self_and_orthogonal() {
        let kg = KnowledgeGraph::from_triples([("A", "genre", "B")]).unwrap();
        let provider = stub();
        let index = Arc::new(RelationIndex::build(&kg, provider.as_ref(), 16).unwrap());
        assert_eq!(index.len(), 2);
        let s = EmbeddingScorer::new(index, provider, FallbackPolicy::Fail);
        assert!((s.sim("genre", "genre").unwrap() - 1.0).abs() < 1e-6);
        assert!(s.sim("genre", "~genre").unwrap().abs() < 1e-6);
        assert!((s.sim("style", "genre").unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn provider_failure_falls_back_or_fails() {
        let provider = stub();
        let index = Arc::new(RelationIndex::new(2));
        let soft = EmbeddingScorer::new(index.clone(), provider.clone(), FallbackPolicy::Fuzzy);
        assert_eq!(soft.sim("missing", "missing").unwrap(), 1.0);
        let hard = EmbeddingScorer::new(index, provider, FallbackPolicy::Fail);
        assert!(matches!(hard.sim("missing", "genre"), Err(ScoreError::Provider(_))));
    }

    #[test]
    fn hashing_embedder_is_unit_and_deterministic() {
        let e = HashingEmbedder::new(64);
        let a = e.embed(&["associated band".into(), "genre".into()]).unwrap();
        let b = e.embed(&["associated band".into(), "genre".into()]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| is_unit(v)));
    }

    #[test]
    fn batch_matches_scalar() {
        let kg = KnowledgeGraph::from_triples(
            (0..50).map(|i| (format!("e{i}"), format!("rel {}", i % 17), format!("f{i}"))),
        )
        .unwrap();
        let provider = Arc::new(HashingEmbedder::new(32));
        let index = Arc::new(RelationIndex::build(&kg, provider.as_ref(), 7).unwrap());
        let scorer = EmbeddingScorer::new(index.clone(), provider.clone(), FallbackPolicy::Fail);
        let rels: Vec<&str> = kg.relations().iter().map(String::as_str).collect();
        for q in ["rel 3", "relation three", "~rel 5"] {
            let batch = scorer.sim_many(q, &rels).unwrap();
            let qv = &provider.embed(&[q.to_string()]).unwrap()[0];
            for (r, s) in rels.iter().zip(batch) {
                let expected = dot(qv, index.get(r).unwrap());
                assert!((s - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let kg = KnowledgeGraph::from_triples([("A", "genre", "B"), ("B", "writer", "C")]).unwrap();
        let index = RelationIndex::build(&kg, &HashingEmbedder::new(8), 3).unwrap();
        let mut buf = Vec::new();
        index.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..8], RELATION_INDEX_MAGIC);
        let back = RelationIndex::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, index);
        buf[0] = b'X';
        assert!(RelationIndex::read_snapshot(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn fuzzy_matches_dp_oracle(a in "[a-c ~]{0,8}", b in "[a-c ~]{0,8}") {
            let longest = a.chars().count().max(b.chars().count());
            let expected = if longest == 0 { 1.0 } else { 1.0 - lev_oracle(&a, &b) as f64 / longest as f64 };
            prop_assert!((sim_fuzzy(&a, &b) - expected).abs() < 1e-12);
            prop_assert_eq!(sim_fuzzy(&a, &b), sim_fuzzy(&b, &a));
        }

        #[test]
        fn exact_implies_fuzzy(a in "\\PC{0,10}") {
            prop_assert_eq!(sim_exact(&a, &a), 1.0);
            prop_assert_eq!(sim_fuzzy(&a, &a), 1.0);
        }
    }
}
