//! Claim verification over knowledge graphs.
//!
//! A specialized model writes each claim as pseudo-subgraphs under an
//! entity-trie constraint, retrieval maps those onto real KG triples, and a
//! general chat model reads the evidence and returns a verdict.

pub mod annotation;
pub mod eval;
pub mod generation;
pub mod http;
pub mod kg;
pub mod limiter;
pub mod mock;
pub mod pseudo_graph;
pub mod reasoning;
pub mod retrieval;
pub mod scoring;
pub mod tokenizer;
pub mod trie;
