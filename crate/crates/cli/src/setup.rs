//! Loading artifacts and wiring backends from resolved settings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use kgclaim::eval::{FewShotGenerator, Pipeline, PseudoGraphSource, SampledGenerator, ScriptedGenerator};
use kgclaim::generation::remote::RemoteCompletionModel;
use kgclaim::http::{HttpSettings, JsonClient};
use kgclaim::kg::{load_kg, read_snapshot, KnowledgeGraph, SNAPSHOT_MAGIC};
use kgclaim::limiter::ConcurrencyLimiter;
use kgclaim::mock::ScriptedChat;
use kgclaim::reasoning::{ChatClient, ChatModel};
use kgclaim::scoring::{
    EmbeddingProvider, EmbeddingScorer, ExactScorer, FallbackPolicy, FuzzyScorer, HashingEmbedder,
    HttpEmbeddingProvider, RelationIndex, RelationScorer, ScorerKind,
};
use kgclaim::tokenizer::WordTokenizer;
use kgclaim::trie::{read_trie_snapshot, EntityTrie};
use serde::Deserialize;

use crate::config::{EmbeddingFallback, GeneratorKind, Settings};

pub type Error = Box<dyn std::error::Error + Send + Sync>;

/// `--mock` file: scripted pseudo-subgraphs per claim and chat rules.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct MockFile {
    #[serde(default)]
    pub pseudo_graphs: HashMap<String, Vec<String>>,
    #[serde(default)]
    pub chat: ScriptedChat,
}

impl MockFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
    }
}

/// Reads a binary index when the file starts with its magic, TSV otherwise.
pub fn open_kg(path: &Path) -> Result<KnowledgeGraph, Error> {
    let mut file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut head = [0u8; 8];
    let n = file.read(&mut head)?;
    let file = File::open(path)?;
    if n == head.len() && &head == SNAPSHOT_MAGIC {
        Ok(read_snapshot(BufReader::new(file))?)
    } else {
        Ok(load_kg(BufReader::new(file))?)
    }
}

/// Tokenizer trained on the entity labels plus the relation vocabulary.
pub fn lexicon_tokenizer(kg: &KnowledgeGraph) -> WordTokenizer {
    WordTokenizer::from_corpus(
        kg.entities()
            .iter()
            .chain(kg.relations())
            .map(String::as_str)
            .chain(["unknown_0 || ~"]),
    )
}

pub fn build_trie(kg: &KnowledgeGraph) -> Result<(EntityTrie, WordTokenizer), Error> {
    let tok = lexicon_tokenizer(kg);
    let trie = EntityTrie::build(kg.entities(), &tok)?;
    Ok((trie, tok))
}

fn load_or_build_trie(kg: &KnowledgeGraph, path: Option<&Path>) -> Result<(EntityTrie, WordTokenizer), Error> {
    match path {
        Some(p) => {
            let file = File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(read_trie_snapshot(BufReader::new(file))?)
        }
        None => build_trie(kg),
    }
}

pub fn json_client(prefix: &str, s: &Settings, limiter: &ConcurrencyLimiter) -> Result<Option<JsonClient>, Error> {
    let Some(mut http) = HttpSettings::from_env(prefix) else {
        return Ok(None);
    };
    http.timeout = Duration::from_secs(s.timeout_secs);
    http.max_attempts = s.max_attempts;
    Ok(Some(JsonClient::new(http, limiter.clone())?))
}

fn embedding_provider(s: &Settings, limiter: &ConcurrencyLimiter) -> Result<Arc<dyn EmbeddingProvider>, Error> {
    match json_client("EMBEDDING", s, limiter)? {
        Some(client) => Ok(Arc::new(HttpEmbeddingProvider::probe(client)?)),
        None => {
            log::warn!("EMBEDDING_ENDPOINT not set; using the local hashing embedder");
            Ok(Arc::new(HashingEmbedder::new(s.embedding_dim)))
        }
    }
}

pub fn scorer(kg: &KnowledgeGraph, s: &Settings, limiter: &ConcurrencyLimiter) -> Result<Arc<dyn RelationScorer>, Error> {
    Ok(match s.scorer {
        ScorerKind::Exact => Arc::new(ExactScorer),
        ScorerKind::Fuzzy => Arc::new(FuzzyScorer),
        ScorerKind::Embedding => {
            let provider = embedding_provider(s, limiter)?;
            let index = match &s.relation_index {
                Some(p) => {
                    let file = File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
                    RelationIndex::read_snapshot(BufReader::new(file))?
                }
                None => RelationIndex::build(kg, provider.as_ref(), 64)?,
            };
            let fallback = match s.embedding_fallback {
                EmbeddingFallback::Fuzzy => FallbackPolicy::Fuzzy,
                EmbeddingFallback::Fail => FallbackPolicy::Fail,
            };
            Arc::new(EmbeddingScorer::new(Arc::new(index), provider, fallback))
        }
    })
}

/// Builds the pipeline. `pseudo` (from `verify --pseudo`) scripts the
/// pseudo-subgraphs for `claim` directly.
pub fn pipeline(s: &Settings, pseudo: Option<(&str, Vec<String>)>) -> Result<Pipeline, Error> {
    let kg = Arc::new(open_kg(&s.kg)?);
    let limiter = ConcurrencyLimiter::new(s.max_in_flight);
    let mock = s.mock.as_deref().map(MockFile::load).transpose()?;

    let reasoner: Arc<dyn ChatModel> = match (&mock, json_client("LM", s, &limiter)?) {
        (Some(m), _) => Arc::new(m.chat.clone()),
        (None, Some(client)) => Arc::new(ChatClient::new(client)),
        (None, None) => return Err("no reasoning model: set LM_ENDPOINT (and LM_MODEL) or pass --mock".into()),
    };

    let kind = s.generator.unwrap_or(if mock.is_some() || pseudo.is_some() {
        GeneratorKind::Scripted
    } else {
        GeneratorKind::Sampled
    });
    let generator: Arc<dyn PseudoGraphSource> = match kind {
        GeneratorKind::Scripted => {
            let mut graphs = mock.map(|m| m.pseudo_graphs).unwrap_or_default();
            if let Some((claim, texts)) = pseudo {
                graphs.insert(claim.to_string(), texts);
            }
            Arc::new(ScriptedGenerator { graphs })
        }
        GeneratorKind::Sampled => {
            let client = json_client("SPECIALIZED_LM", s, &limiter)?
                .ok_or("sampled generation needs SPECIALIZED_LM_ENDPOINT (or use --mock / --pseudo)")?;
            let (trie, tok) = load_or_build_trie(&kg, s.trie.as_deref())?;
            Arc::new(SampledGenerator {
                model: Arc::new(RemoteCompletionModel::new(client)),
                tokenizer: Arc::new(tok),
                trie: Arc::new(trie),
                samples: s.beams,
            })
        }
        GeneratorKind::Fewshot => Arc::new(FewShotGenerator {
            model: Arc::clone(&reasoner),
            kg: Some(Arc::clone(&kg)),
        }),
    };

    let scorer = scorer(&kg, s, &limiter)?;
    let mut p = Pipeline::new(kg, generator, scorer, reasoner);
    p.retrieval.k1 = s.k1;
    p.retrieval.k2 = s.k2;
    p.retrieval.hub_cap = s.hub_cap;
    p.malformed = s.malformed;
    p.use_evidence = !s.no_evidence;
    Ok(p)
}
