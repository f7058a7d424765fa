mod config;
mod setup;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kgclaim::annotation::{annotate_jsonl, EntityClassifier};
use kgclaim::eval::{read_dataset, render_table, run_eval, Category, EvalConfig};
use kgclaim::kg::write_snapshot;
use kgclaim::limiter::ConcurrencyLimiter;
use kgclaim::reasoning::ChatClient;
use kgclaim::scoring::RelationIndex;
use kgclaim::trie::write_trie_snapshot;

use config::{FileConfig, PipelineArgs, Settings};
use setup::Error;

#[derive(Parser)]
#[command(name = "kgclaim", version, about = "Claim verification over a knowledge graph")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-graph artifacts.
    #[command(subcommand)]
    Kg(KgCommand),
    /// Entity-trie artifacts.
    #[command(subcommand)]
    Trie(TrieCommand),
    /// Verify one claim and print the result as JSON.
    Verify {
        #[arg(long)]
        claim: String,
        /// Pseudo-subgraph text to use instead of generation (repeatable;
        /// `\n` separates triples).
        #[arg(long)]
        pseudo: Vec<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run a JSONL dataset and print the metrics report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write one result record per claim here.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Print the accuracy table instead of JSON.
        #[arg(long)]
        table: bool,
        /// Restrict to these categories (repeatable).
        #[arg(long)]
        category: Vec<String>,
        /// Score only claims predicted Supported.
        #[arg(long)]
        support_predicted_only: bool,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Turn evidence-path records into (claim, pseudo-subgraph) training pairs.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shuffle seed; record i uses seed + i. Omit for no shuffling.
        #[arg(long)]
        seed: Option<u64>,
        /// Classify entities with the LM_* chat model instead of substring matching.
        #[arg(long)]
        remote_classifier: bool,
    },
}

#[derive(Subcommand)]
enum KgCommand {
    /// Parse a TSV file into a binary index.
    BuildIndex {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every relation (and its inverse) into a snapshot.
    EmbedRelations {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrieCommand {
    /// Build the entity trie and its tokenizer from a KG.
    Build {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path).map_err(|e| format!("{}: {e}", path.display()))?))
}

fn file_config(cli: &Cli) -> Result<FileConfig, Error> {
    Ok(match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let file = file_config(&cli)?;
    match cli.command {
        Command::Kg(KgCommand::BuildIndex { kg, out }) => {
            let graph = setup::open_kg(&kg)?;
            let mut w = create(&out)?;
            write_snapshot(&graph, &mut w)?;
            w.flush()?;
            eprintln!(
                "{} entities, {} relations, {} triples -> {}",
                graph.entity_count(),
                graph.relation_count(),
                graph.triple_count(),
                out.display()
            );
        }
        Command::Kg(KgCommand::EmbedRelations { kg, out }) => {
            let settings = Settings::resolve(
                &PipelineArgs {
                    kg: Some(kg),
                    scorer: Some("embedding".into()),
                    ..Default::default()
                },
                &file,
            )?;
            let graph = setup::open_kg(&settings.kg)?;
            let limiter = ConcurrencyLimiter::new(settings.max_in_flight);
            let provider: Box<dyn kgclaim::scoring::EmbeddingProvider> =
                match setup::json_client("EMBEDDING", &settings, &limiter)? {
                    Some(c) => Box::new(kgclaim::scoring::HttpEmbeddingProvider::probe(c)?),
                    None => Box::new(kgclaim::scoring::HashingEmbedder::new(settings.embedding_dim)),
                };
            let index = RelationIndex::build(&graph, provider.as_ref(), 64)?;
            let mut w = create(&out)?;
            index.write_snapshot(&mut w)?;
            w.flush()?;
            eprintln!("{} relation vectors (dim {}) -> {}", index.len(), index.dim(), out.display());
        }
        Command::Trie(TrieCommand::Build { kg, out }) => {
            let graph = setup::open_kg(&kg)?;
            let (trie, tok) = setup::build_trie(&graph)?;
            let mut w = create(&out)?;
            write_trie_snapshot(&trie, &tok, &mut w)?;
            w.flush()?;
            eprintln!("{} entities, {} nodes -> {}", trie.entity_count(), trie.node_count(), out.display());
        }
        Command::Verify { claim, pseudo, pipeline } => {
            let settings = Settings::resolve(&pipeline, &file)?;
            let pseudo = (!pseudo.is_empty()).then(|| (claim.as_str(), pseudo.iter().map(|p| p.replace("\\n", "\n")).collect()));
            let p = setup::pipeline(&settings, pseudo)?;
            let result = p.verify_claim(&claim)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Eval {
            dataset,
            report,
            results,
            table,
            category,
            support_predicted_only,
            threads,
            pipeline,
        } => {
            let settings = Settings::resolve(&pipeline, &file)?;
            let categories = if category.is_empty() {
                None
            } else {
                Some(category.iter().map(|c| c.parse::<Category>()).collect::<Result<Vec<_>, _>>()?)
            };
            let p = setup::pipeline(&settings, None)?;
            let ds = read_dataset(BufReader::new(
                File::open(&dataset).map_err(|e| format!("{}: {e}", dataset.display()))?,
            ))?;
            let cfg = EvalConfig {
                categories,
                support_predicted_only,
                threads: threads.or(settings.threads),
            };
            let out = run_eval(&p, &ds, &cfg);
            if let Some(path) = results {
                let mut w = create(&path)?;
                for r in &out.results {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            let json = serde_json::to_string_pretty(&out.report)?;
            match report {
                Some(path) => {
                    let mut w = create(&path)?;
                    writeln!(w, "{json}")?;
                    w.flush()?;
                }
                None if !table => println!("{json}"),
                None => {}
            }
            if table {
                print!("{}", render_table(&out.report));
            }
        }
        Command::Annotate {
            input,
            out,
            seed,
            remote_classifier,
        } => {
            let chat;
            let classifier = if remote_classifier {
                let settings = Settings::resolve(
                    &PipelineArgs {
                        kg: Some(PathBuf::new()),
                        ..Default::default()
                    },
                    &file,
                )?;
                let limiter = ConcurrencyLimiter::new(settings.max_in_flight);
                let client = setup::json_client("LM", &settings, &limiter)?
                    .ok_or("--remote-classifier needs LM_ENDPOINT")?;
                chat = ChatClient::new(client);
                EntityClassifier::Remote(&chat)
            } else {
                EntityClassifier::Offline
            };
            let reader = BufReader::new(File::open(&input).map_err(|e| format!("{}: {e}", input.display()))?);
            let mut w = create(&out)?;
            let stats = annotate_jsonl(reader, &mut w, &classifier, seed)?;
            w.flush()?;
            eprintln!("{} examples written, {} records skipped", stats.written, stats.skipped);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
