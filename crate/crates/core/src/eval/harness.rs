//! Dataset runs: read JSONL records, verify each claim in parallel, tally
//! metrics in record order.

use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use super::metrics::{coverage_multi, entity_correctness_multi, unique_triplet_count};
use super::{Pipeline, PipelineError, VerificationResult};
use crate::annotation::{build_training_example, AnnotationRecord, EntityClassifier, EvidencePath};
use crate::pseudo_graph::{parse_pseudo_subgraph, PseudoSubgraph};
use crate::reasoning::Verdict;
use crate::retrieval::EvidenceSubgraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    OneHop,
    Conjunction,
    Existence,
    MultiHop,
    Negation,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::OneHop,
        Category::Conjunction,
        Category::Existence,
        Category::MultiHop,
        Category::Negation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::OneHop => "One-hop",
            Category::Conjunction => "Conjunction",
            Category::Existence => "Existence",
            Category::MultiHop => "Multi-hop",
            Category::Negation => "Negation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    /// Case, spaces, dashes and underscores are ignored: "multi_hop",
    /// "Multi-hop" and "multihop" are all accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "onehop" | "1hop" => Ok(Category::OneHop),
            "conjunction" => Ok(Category::Conjunction),
            "existence" => Ok(Category::Existence),
            "multihop" => Ok(Category::MultiHop),
            "negation" => Ok(Category::Negation),
            _ => Err(format!("unknown claim category {s:?}")),
        }
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One dataset line: the annotation record plus a category tag and an
/// optional gold pseudo-graph in the raw output grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<EvidencePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_graph: Option<String>,
}

impl DatasetRecord {
    /// The gold pseudo-graph: `gold_graph` when given, otherwise the label the
    /// annotation pipeline builds from `evidence` (offline classifier,
    /// identity shuffle). `None` when neither is available or usable.
    pub fn gold(&self) -> Option<PseudoSubgraph> {
        if let Some(text) = &self.gold_graph {
            return parse_pseudo_subgraph(text, None).ok().map(|g| g.canonicalize());
        }
        if self.evidence.is_empty() {
            return None;
        }
        let record = AnnotationRecord {
            claim: self.claim.clone(),
            label: self.label,
            entities: self.entities.clone(),
            evidence: self.evidence.clone(),
        };
        let (example, _) = build_training_example(&record, &EntityClassifier::Offline, None).ok()?;
        parse_pseudo_subgraph(&example.label, None).ok()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Non-blank lines that did not parse as a record.
    pub unreadable: usize,
}

pub fn read_dataset<R: BufRead>(reader: R) -> std::io::Result<Dataset> {
    let mut ds = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRecord>(&line) {
            Ok(r) => ds.records.push(r),
            Err(e) => {
                log::warn!("dataset line {}: {e}", i + 1);
                ds.unreadable += 1;
            }
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Only records in these categories are run; `None` runs everything.
    #[serde(default)]
    pub categories: Option<Vec<Category>>,
    /// Score only claims the pipeline predicted Supported.
    #[serde(default)]
    pub support_predicted_only: bool,
    /// Worker threads; `None` uses the global rayon pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Where every record went. `unreadable + evaluated + the rest` equals the
/// number of non-blank input lines.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipCounts {
    pub unreadable: usize,
    pub filtered_category: usize,
    pub pipeline_errors: usize,
    pub not_support_predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStats {
    pub category: Category,
    pub evaluated: usize,
    pub labeled: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub total_lines: usize,
    pub evaluated: usize,
    pub skipped: SkipCounts,
    pub labeled: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub per_category: Vec<CategoryStats>,
    /// Unweighted mean over categories with labeled claims.
    pub category_average: Option<f64>,
    /// Mean per-claim entity correctness over all beams.
    pub entity_correctness: Option<f64>,
    /// Mean structure coverage over claims with a gold graph.
    pub structure_coverage: Option<f64>,
    pub coverage_claims: usize,
    pub mean_unique_triplets: Option<f64>,
    /// Share of run claims predicted Supported, before any
    /// support-predicted-only filtering.
    pub support_predicted_rate: Option<f64>,
}

/// One line of the results JSONL.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub claim: String,
    pub verdict: Verdict,
    pub rationale: String,
    pub evidence: EvidenceSubgraph,
    pub pseudo_subgraphs: Vec<PseudoSubgraph>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub results: Vec<ResultRecord>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

struct Outcome<'a> {
    record: &'a DatasetRecord,
    result: VerificationResult,
}

pub fn run_eval(pipeline: &Pipeline, dataset: &Dataset, cfg: &EvalConfig) -> EvalOutput {
    let mut skipped = SkipCounts {
        unreadable: dataset.unreadable,
        ..Default::default()
    };
    let selected: Vec<&DatasetRecord> = dataset
        .records
        .iter()
        .filter(|r| match (&cfg.categories, r.category) {
            (None, _) => true,
            (Some(cats), Some(c)) => cats.contains(&c),
            (Some(_), None) => false,
        })
        .collect();
    skipped.filtered_category = dataset.records.len() - selected.len();

    let verify = || -> Vec<Result<VerificationResult, PipelineError>> {
        selected.par_iter().map(|r| pipeline.verify_claim(&r.claim)).collect()
    };
    let raw = match cfg.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(verify),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                verify()
            }
        },
        None => verify(),
    };

    let mut run = Vec::new();
    for (record, res) in selected.iter().zip(raw) {
        match res {
            Ok(result) => run.push(Outcome { record, result }),
            Err(e) => {
                log::warn!("claim {:?} failed: {e}", record.claim);
                skipped.pipeline_errors += 1;
            }
        }
    }
    let supported = run.iter().filter(|o| o.result.verdict == Verdict::Supported).count();
    let support_predicted_rate = rate(supported, run.len());
    if cfg.support_predicted_only {
        skipped.not_support_predicted = run.len() - supported;
        run.retain(|o| o.result.verdict == Verdict::Supported);
    }

    let mut per_category: Vec<CategoryStats> = Category::ALL
        .iter()
        .map(|&category| CategoryStats {
            category,
            evaluated: 0,
            labeled: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    let (mut labeled, mut correct) = (0, 0);
    let mut correctness = Vec::new();
    let mut coverages = Vec::new();
    let mut uniques = Vec::new();
    let mut results = Vec::with_capacity(run.len());
    for o in &run {
        let r = &o.result;
        let hit = o.record.label.map(|l| l == r.verdict);
        let slot = o.record.category.map(|c| &mut per_category[c as usize]);
        if let Some(s) = slot {
            s.evaluated += 1;
            if let Some(h) = hit {
                s.labeled += 1;
                s.correct += usize::from(h);
            }
        }
        if let Some(h) = hit {
            labeled += 1;
            correct += usize::from(h);
        }
        correctness.push(entity_correctness_multi(&r.pseudo_subgraphs, &pipeline.kg).value());
        if let Some(gold) = o.record.gold() {
            coverages.push(coverage_multi(&r.pseudo_subgraphs, &gold).value());
        }
        uniques.push(unique_triplet_count(&r.pseudo_subgraphs) as f64);
        results.push(ResultRecord {
            claim: r.claim.clone(),
            verdict: r.verdict,
            rationale: r.justification.clone(),
            evidence: r.evidence.clone(),
            pseudo_subgraphs: r.pseudo_subgraphs.clone(),
            label: o.record.label,
            correct: hit,
            category: o.record.category,
        });
    }
    for s in &mut per_category {
        s.accuracy = rate(s.correct, s.labeled);
    }
    let category_accs: Vec<f64> = per_category.iter().filter_map(|s| s.accuracy).collect();

    let report = MetricsReport {
        total_lines: dataset.unreadable + dataset.records.len(),
        evaluated: run.len(),
        skipped,
        labeled,
        correct,
        accuracy: rate(correct, labeled),
        per_category,
        category_average: mean(&category_accs),
        entity_correctness: mean(&correctness),
        structure_coverage: mean(&coverages),
        coverage_claims: coverages.len(),
        mean_unique_triplets: mean(&uniques),
        support_predicted_rate,
    };
    EvalOutput { report, results }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * 100.0))
}

/// Accuracy per category then the category average, as percentages.
pub fn render_table(report: &MetricsReport) -> String {
    let mut header: Vec<String> = Category::ALL.iter().map(|c| c.name().to_string()).collect();
    header.push("Average".into());
    let mut row: Vec<String> = report.per_category.iter().map(|s| cell(s.accuracy)).collect();
    row.push(cell(report.category_average));
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let mut out = String::new();
    for line in [&header, &row] {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
