//! Structure coverage, entity correctness and unique-triplet counts.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::kg::KnowledgeGraph;
use crate::pseudo_graph::{PseudoSubgraph, PseudoTriple};

/// An exact fraction. Equality is by value, so `2/4 == 1/2`.
#[derive(Debug, Clone, Copy, Eq, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "ratio with zero denominator");
        Self { num, den }
    }

    pub fn one() -> Self {
        Self { num: 1, den: 1 }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        u128::from(self.num) * u128::from(other.den) == u128::from(other.num) * u128::from(self.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn canonical_set<'a, I: IntoIterator<Item = &'a PseudoSubgraph>>(graphs: I) -> HashSet<PseudoTriple> {
    graphs
        .into_iter()
        .flat_map(|g| g.canonicalize().triples)
        .collect()
}

/// `|P ∩ Q| / |Q|` over canonicalized triples, with `P` the union of
/// `beams`. An empty `Q` counts as fully covered.
pub fn coverage_multi(beams: &[PseudoSubgraph], gold: &PseudoSubgraph) -> Ratio {
    let q = canonical_set([gold]);
    if q.is_empty() {
        return Ratio::one();
    }
    let p = canonical_set(beams);
    Ratio::new(q.intersection(&p).count() as u64, q.len() as u64)
}

pub fn coverage(p: &PseudoSubgraph, q: &PseudoSubgraph) -> Ratio {
    coverage_multi(std::slice::from_ref(p), q)
}

/// Share of distinct known entities (placeholders excluded) that exist in
/// the KG. No known entities counts as fully correct.
pub fn entity_correctness_multi(graphs: &[PseudoSubgraph], kg: &KnowledgeGraph) -> Ratio {
    let entities: HashSet<&str> = graphs.iter().flat_map(|g| g.known_entities()).collect();
    if entities.is_empty() {
        return Ratio::one();
    }
    let present = entities.iter().filter(|e| kg.contains_entity(e)).count();
    Ratio::new(present as u64, entities.len() as u64)
}

pub fn entity_correctness(p: &PseudoSubgraph, kg: &KnowledgeGraph) -> Ratio {
    entity_correctness_multi(std::slice::from_ref(p), kg)
}

/// Distinct canonical triples across all beams of one claim.
pub fn unique_triplet_count(graphs: &[PseudoSubgraph]) -> usize {
    canonical_set(graphs).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_graph::parse_pseudo_subgraph;

    fn g(text: &str) -> PseudoSubgraph {
        parse_pseudo_subgraph(text, None).unwrap()
    }

    #[test]
    fn coverage_examples() {
        let q = g("<e>A</e> || r || <e>B</e>\n<e>B</e> || s || unknown_0\nunknown_0 || t || <e>C</e>");
        assert_eq!(coverage(&q, &q), Ratio::one());
        let p = g("<e>A</e> || r || <e>B</e>\n<e>B</e> || s || unknown_3");
        assert_eq!(coverage(&p, &q), Ratio::new(2, 3));
        assert_eq!(coverage(&p, &PseudoSubgraph::default()), Ratio::one());
    }

    #[test]
    fn correctness_examples() {
        let kg = KnowledgeGraph::from_triples([("Ajoblanco", "ingredient", "Garlic")]).unwrap();
        assert_eq!(entity_correctness(&g("<e>Ajoblanco</e> || ingredient || <e>Onion</e>"), &kg), Ratio::new(1, 2));
        assert_eq!(entity_correctness(&g("unknown_0 || r || unknown_1"), &kg), Ratio::one());
    }

    #[test]
    fn unique_counts() {
        let three = g("<e>A</e> || r || <e>B</e>\n<e>B</e> || s || <e>C</e>\n<e>C</e> || t || <e>D</e>");
        assert_eq!(unique_triplet_count(&vec![three.clone(); 5]), 3);
        let two = g("<e>X</e> || r || <e>Y</e>\n<e>Y</e> || s || <e>Z</e>");
        assert_eq!(unique_triplet_count(&[two, three]), 5);
    }

    #[test]
    fn ratios_compare_by_value() {
        assert_eq!(Ratio::new(2, 4), Ratio::new(1, 2));
        assert_ne!(Ratio::new(2, 3), Ratio::new(1, 2));
    }
}
