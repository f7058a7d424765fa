//! Run settings: a TOML file, then command-line flags on top.

use std::path::{Path, PathBuf};

use kgclaim::reasoning::MalformedPolicy;
use kgclaim::scoring::ScorerKind;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Fixed pseudo-subgraphs from `--mock` or `--pseudo`.
    Scripted,
    /// Remote completions kept only when every entity is in the trie.
    Sampled,
    /// Few-shot prompting of the reasoning model, unconstrained.
    Fewshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFallback {
    Fuzzy,
    Fail,
}

/// Everything a config file may set. All keys are optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub kg: Option<PathBuf>,
    pub trie: Option<PathBuf>,
    pub relation_index: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub beams: Option<usize>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub hub_cap: Option<usize>,
    pub scorer: Option<String>,
    pub generator: Option<GeneratorKind>,
    pub malformed: Option<MalformedPolicy>,
    pub embedding_fallback: Option<EmbeddingFallback>,
    pub embedding_dim: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub threads: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub max_attempts: Option<u32>,
    pub no_evidence: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Pipeline flags shared by `verify` and `eval`; unset flags fall back to
/// the config file, then to defaults.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct PipelineArgs {
    /// KG as TSV or as a binary index from `kg build-index`.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// Trie snapshot from `trie build`; built from the KG when absent.
    #[arg(long)]
    pub trie: Option<PathBuf>,
    /// Relation embedding snapshot from `kg embed-relations`.
    #[arg(long)]
    pub relation_index: Option<PathBuf>,
    /// Offline mode: JSON with scripted pseudo-subgraphs and chat rules.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub beams: Option<usize>,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    #[arg(long)]
    pub hub_cap: Option<usize>,
    /// exact, fuzzy or embedding.
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorKind>,
    /// Ask once more when the verdict JSON is malformed.
    #[arg(long)]
    pub reask: bool,
    #[arg(long, value_enum)]
    pub embedding_fallback: Option<EmbeddingFallback>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Show the reasoner an empty triplet list.
    #[arg(long)]
    pub no_evidence: bool,
}

/// Resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub kg: PathBuf,
    pub trie: Option<PathBuf>,
    pub relation_index: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub beams: usize,
    pub k1: usize,
    pub k2: usize,
    pub hub_cap: usize,
    pub scorer: ScorerKind,
    pub generator: Option<GeneratorKind>,
    pub malformed: MalformedPolicy,
    pub embedding_fallback: EmbeddingFallback,
    pub embedding_dim: usize,
    pub max_in_flight: usize,
    pub threads: Option<usize>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub no_evidence: bool,
}

impl Settings {
    pub fn resolve(args: &PipelineArgs, file: &FileConfig) -> Result<Self, String> {
        let kg = args
            .kg
            .clone()
            .or_else(|| file.kg.clone())
            .ok_or("no KG given (use --kg or `kg` in the config file)")?;
        let scorer = args
            .scorer
            .as_deref()
            .or(file.scorer.as_deref())
            .unwrap_or("fuzzy")
            .parse()?;
        let s = Self {
            kg,
            trie: args.trie.clone().or_else(|| file.trie.clone()),
            relation_index: args.relation_index.clone().or_else(|| file.relation_index.clone()),
            mock: args.mock.clone().or_else(|| file.mock.clone()),
            beams: args.beams.or(file.beams).unwrap_or(5),
            k1: args.k1.or(file.k1).unwrap_or(3),
            k2: args.k2.or(file.k2).unwrap_or(1),
            hub_cap: args.hub_cap.or(file.hub_cap).unwrap_or(kgclaim::kg::DEFAULT_HUB_CAP),
            scorer,
            generator: args.generator.or(file.generator),
            malformed: if args.reask {
                MalformedPolicy::ReaskOnce
            } else {
                file.malformed.unwrap_or_default()
            },
            embedding_fallback: args
                .embedding_fallback
                .or(file.embedding_fallback)
                .unwrap_or(EmbeddingFallback::Fuzzy),
            embedding_dim: file.embedding_dim.unwrap_or(256),
            max_in_flight: args
                .max_in_flight
                .or(file.max_in_flight)
                .unwrap_or(kgclaim::limiter::DEFAULT_MAX_IN_FLIGHT),
            threads: file.threads,
            timeout_secs: args.timeout_secs.or(file.timeout_secs).unwrap_or(60),
            max_attempts: args.max_attempts.or(file.max_attempts).unwrap_or(3),
            no_evidence: args.no_evidence || file.no_evidence.unwrap_or(false),
        };
        if s.beams == 0 {
            return Err("--beams must be at least 1".into());
        }
        if s.k1 == 0 || s.k2 == 0 {
            return Err("--k1 and --k2 must be at least 1".into());
        }
        Ok(s)
    }
}
