//! End-to-end verification: generate pseudo-subgraphs, retrieve evidence,
//! ask the reasoner. Plus dataset evaluation and metrics.

mod harness;
pub mod metrics;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::generation::remote::{generate_then_validate, CompletionModel};
use crate::generation::{beam_decode, DecoderConfig, LanguageModel};
use crate::http::ClientError;
use crate::kg::KnowledgeGraph;
use crate::pseudo_graph::{parse_pseudo_subgraph, PseudoSubgraph};
use crate::reasoning::{fewshot_generate_pseudo_subgraphs, reason, ChatModel, MalformedPolicy, ReasoningError, Verdict, VerdictError};
use crate::retrieval::{retrieve_subgraph_traced, EvidenceSubgraph, RetrievalConfig};
use crate::scoring::{RelationScorer, ScoreError};
use crate::tokenizer::Tokenizer;
use crate::trie::EntityTrie;

pub use harness::{
    read_dataset, render_table, run_eval, Category, CategoryStats, Dataset, DatasetRecord, EvalConfig, EvalOutput,
    MetricsReport, ResultRecord, SkipCounts,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
}

impl From<ReasoningError> for PipelineError {
    fn from(e: ReasoningError) -> Self {
        match e {
            ReasoningError::Client(c) => PipelineError::Client(c),
            ReasoningError::Verdict(v) => PipelineError::Verdict(v),
        }
    }
}

/// Pseudo-subgraphs for one claim, with whatever went wrong on the way.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generated {
    pub graphs: Vec<PseudoSubgraph>,
    pub diagnostics: Vec<String>,
    pub pruned: usize,
}

pub trait PseudoGraphSource: Send + Sync {
    /// Only transport failures are errors; anything else degrades to fewer
    /// graphs plus diagnostics.
    fn generate(&self, claim: &str) -> Result<Generated, ClientError>;
}

fn parse_beam(text: &str, kg: Option<&KnowledgeGraph>, out: &mut Generated, score: Option<f64>) {
    match parse_pseudo_subgraph(text, kg) {
        Ok(g) if g.triples.is_empty() => out.diagnostics.push("empty beam".into()),
        Ok(g) => {
            let mut g = g.canonicalize();
            g.beam_score = score;
            out.graphs.push(g);
        }
        Err(e) => out.diagnostics.push(format!("unparseable beam: {e}")),
    }
}

/// Beam search with the entity-trie constraint over a local model.
pub struct TrieGenerator {
    pub lm: Arc<dyn LanguageModel>,
    pub tokenizer: Arc<dyn Tokenizer>,
    pub trie: Arc<EntityTrie>,
    pub decoder: DecoderConfig,
    serial: Mutex<()>,
}

impl TrieGenerator {
    pub fn new(
        lm: Arc<dyn LanguageModel>,
        tokenizer: Arc<dyn Tokenizer>,
        trie: Arc<EntityTrie>,
        decoder: DecoderConfig,
    ) -> Self {
        Self {
            lm,
            tokenizer,
            trie,
            decoder,
            serial: Mutex::new(()),
        }
    }
}

impl PseudoGraphSource for TrieGenerator {
    fn generate(&self, claim: &str) -> Result<Generated, ClientError> {
        let prompt = self.tokenizer.encode(claim);
        let _guard = (!self.lm.supports_concurrency()).then(|| self.serial.lock().expect("decoder lock poisoned"));
        let mut out = Generated::default();
        match beam_decode(self.lm.as_ref(), &prompt, &self.trie, &self.decoder) {
            Ok(beams) => {
                out.pruned = beams.pruned;
                out.diagnostics.extend(beams.diagnostic);
                for h in &beams.hypotheses {
                    let text = self.tokenizer.decode(&h.tokens);
                    parse_beam(&text, None, &mut out, Some(h.score()));
                }
            }
            Err(e) => out.diagnostics.push(format!("decoding failed: {e}")),
        }
        Ok(out)
    }
}

/// Remote sampling filtered by the trie, for backends without per-step
/// distributions.
pub struct SampledGenerator {
    pub model: Arc<dyn CompletionModel>,
    pub tokenizer: Arc<dyn Tokenizer>,
    pub trie: Arc<EntityTrie>,
    pub samples: usize,
}

impl PseudoGraphSource for SampledGenerator {
    fn generate(&self, claim: &str) -> Result<Generated, ClientError> {
        let v = generate_then_validate(self.model.as_ref(), claim, self.samples, &self.trie, self.tokenizer.as_ref())?;
        let mut out = Generated {
            pruned: v.rejected,
            ..Default::default()
        };
        for text in &v.accepted {
            parse_beam(text, None, &mut out, None);
        }
        Ok(out)
    }
}

/// Few-shot prompting of a general chat model, without any constraint.
pub struct FewShotGenerator {
    pub model: Arc<dyn ChatModel>,
    pub kg: Option<Arc<KnowledgeGraph>>,
}

impl PseudoGraphSource for FewShotGenerator {
    fn generate(&self, claim: &str) -> Result<Generated, ClientError> {
        let out = fewshot_generate_pseudo_subgraphs(self.model.as_ref(), claim, self.kg.as_deref())?;
        let mut diagnostics: Vec<String> = out.diagnostic.into_iter().collect();
        for g in &out.graphs {
            if !g.is_valid() {
                diagnostics.push(format!("entities not in the KG: {}", g.missing_entities.join(", ")));
            }
        }
        Ok(Generated {
            graphs: out.graphs.into_iter().map(|g| g.graph).collect(),
            diagnostics,
            pruned: 0,
        })
    }
}

/// Fixed pseudo-subgraph texts per claim; claims without an entry get none.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedGenerator {
    pub graphs: HashMap<String, Vec<String>>,
}

impl PseudoGraphSource for ScriptedGenerator {
    fn generate(&self, claim: &str) -> Result<Generated, ClientError> {
        let mut out = Generated::default();
        match self.graphs.get(claim) {
            Some(texts) => {
                for t in texts {
                    parse_beam(t, None, &mut out, None);
                }
            }
            None => out.diagnostics.push("no scripted pseudo-subgraphs for claim".into()),
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub beams: usize,
    pub pruned_beams: usize,
    pub messages: Vec<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationResult {
    pub claim: String,
    pub pseudo_subgraphs: Vec<PseudoSubgraph>,
    pub evidence: EvidenceSubgraph,
    pub justification: String,
    pub verdict: Verdict,
    pub diagnostics: Diagnostics,
}

/// Everything needed to verify claims. Shared read-only across workers.
pub struct Pipeline {
    pub kg: Arc<KnowledgeGraph>,
    pub generator: Arc<dyn PseudoGraphSource>,
    pub scorer: Arc<dyn RelationScorer>,
    pub reasoner: Arc<dyn ChatModel>,
    pub retrieval: RetrievalConfig,
    pub malformed: MalformedPolicy,
    /// When false the reasoner sees an empty triplet list.
    pub use_evidence: bool,
}

impl Pipeline {
    pub fn new(
        kg: Arc<KnowledgeGraph>,
        generator: Arc<dyn PseudoGraphSource>,
        scorer: Arc<dyn RelationScorer>,
        reasoner: Arc<dyn ChatModel>,
    ) -> Self {
        Self {
            kg,
            generator,
            scorer,
            reasoner,
            retrieval: RetrievalConfig::default(),
            malformed: MalformedPolicy::Error,
            use_evidence: true,
        }
    }

    pub fn verify_claim(&self, claim: &str) -> Result<VerificationResult, PipelineError> {
        let start = Instant::now();
        let generated = self.generator.generate(claim)?;
        let mut messages = generated.diagnostics;
        let (evidence, trace) = retrieve_subgraph_traced(&self.kg, &generated.graphs, &self.retrieval, self.scorer.as_ref())?;
        if !trace.skipped_triples.is_empty() {
            messages.push(format!("{} triples with two unknowns skipped", trace.skipped_triples.len()));
        }
        if !trace.missing_anchors.is_empty() {
            messages.push(format!("anchors not in the KG: {}", trace.missing_anchors.join(", ")));
        }
        let shown = if self.use_evidence { evidence.triples() } else { &[] };
        let reasoned = reason(self.reasoner.as_ref(), claim, shown, self.malformed)?;
        Ok(VerificationResult {
            claim: claim.to_string(),
            diagnostics: Diagnostics {
                beams: generated.graphs.len(),
                pruned_beams: generated.pruned,
                messages,
                elapsed_ms: start.elapsed().as_millis() as u64,
            },
            pseudo_subgraphs: generated.graphs,
            evidence,
            justification: reasoned.rationale,
            verdict: reasoned.verdict,
        })
    }
}
