//! Condition-grid evaluation: run every (example, condition) cell, score
//! exact match after canonicalization, and summarize with bootstrap
//! intervals and paired permutation tests against the full pipeline.

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use crate::bank::verbalize_predicate;
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, ProvenanceIndex};
use crate::inject::{answer_query, Condition, PipelineConfig, QueryStores, Trace};
use crate::retrieval::{fnv1a64, Query};
use crate::stats::{
    bootstrap_ci, permutation_test, DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_CI_LEVEL,
    DEFAULT_PERMUTATIONS,
};

/// How predictions are canonicalized before matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerMode {
    #[default]
    #[serde(rename = "free")]
    Free,
    /// Extract the first DrugBank-style identifier (`DB` + digits).
    #[serde(rename = "medhop-id")]
    MedhopId,
}

fn medhop_id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)DB[0-9]+").expect("static pattern"))
}

/// Lowercases, collapses whitespace runs, trims; no synonym expansion. In
/// id mode, reduces to the first identifier token (or empty when absent).
pub fn canonicalize(text: &str, mode: AnswerMode) -> String {
    match mode {
        AnswerMode::Free => text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
        AnswerMode::MedhopId => medhop_id_pattern()
            .find(text)
            .map(|m| m.as_str().to_lowercase())
            .unwrap_or_default(),
    }
}

pub fn exact_match(prediction: &str, gold_answers: &[String], mode: AnswerMode) -> u8 {
    let p = canonicalize(prediction, mode);
    gold_answers
        .iter()
        .any(|g| canonicalize(g, mode) == p) as u8
}

/// One dataset row. Wire format is JSONL with keys `id`, `question`,
/// `answers`, and optional `mode`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "is_default_mode")]
    pub mode: AnswerMode,
}

fn is_default_mode(mode: &AnswerMode) -> bool {
    *mode == AnswerMode::Free
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(&line).map_err(|e| {
            Error::SchemaViolation {
                path: format!("line {}", lineno + 1),
                message: e.to_string(),
            }
        })?;
        if ex.answers.is_empty() {
            return Err(Error::SchemaViolation {
                path: format!("line {}", lineno + 1),
                message: format!("example {} has no gold answers", ex.id),
            });
        }
        if !seen.insert(ex.id.clone()) {
            return Err(Error::SchemaViolation {
                path: format!("line {}", lineno + 1),
                message: format!("duplicate example id {}", ex.id),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn save_dataset(examples: &[QAExample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One grid cell's outcome. Timing and the retrieval trace stay in memory
/// only, so persisted records are identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub condition: String,
    pub prediction: String,
    pub em: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub latency_ms: f64,
    #[serde(skip)]
    pub trace: Option<Trace>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub n: usize,
    pub em_percent: f64,
    pub ci: (f64, f64),
    /// Paired permutation p-value against the full pipeline; absent for
    /// the full pipeline itself or when it is not in the grid.
    pub p_vs_kvi: Option<f64>,
}

#[derive(Debug)]
pub struct GridResult {
    /// Sorted by example_id, then condition order as requested, so
    /// concurrent evaluation always merges identically.
    pub records: Vec<EvalRecord>,
    /// One summary per requested condition, in request order.
    pub summaries: Vec<ConditionSummary>,
}

/// Runs the full grid. Cells evaluate concurrently; a cell failure is
/// recorded (em = 0, error note) without aborting the rest.
pub fn run_grid(
    dataset: &[QAExample],
    conditions: &[Condition],
    stores: &QueryStores<'_>,
    config: &PipelineConfig,
) -> Result<GridResult> {
    if conditions.is_empty() {
        return Err(Error::InvalidInput("no conditions requested".into()));
    }
    let cells: Vec<(usize, usize)> = (0..dataset.len())
        .flat_map(|e| (0..conditions.len()).map(move |c| (e, c)))
        .collect();

    let mut records: Vec<EvalRecord> = cells
        .par_iter()
        .map(|&(e, c)| {
            let example = &dataset[e];
            let condition = conditions[c];
            let started = Instant::now();
            let outcome = Query::new(example.question.clone())
                .and_then(|q| answer_query(&q, stores, config, condition));
            let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
            match outcome {
                Ok(answer) => EvalRecord {
                    example_id: example.id.clone(),
                    condition: condition.to_string(),
                    em: exact_match(&answer.text, &example.answers, example.mode),
                    prediction: answer.text,
                    error: None,
                    latency_ms,
                    trace: Some(answer.trace),
                },
                Err(err) => EvalRecord {
                    example_id: example.id.clone(),
                    condition: condition.to_string(),
                    prediction: String::new(),
                    em: 0,
                    error: Some(err.to_string()),
                    latency_ms,
                    trace: None,
                },
            }
        })
        .collect();

    records.sort_by_key(|r| {
        let c = conditions.iter().position(|c| c.to_string() == r.condition).unwrap_or(usize::MAX);
        (r.example_id.clone(), c)
    });

    let summaries = summarize(&records, conditions, config.seed)?;
    Ok(GridResult { records, summaries })
}

/// Computes per-condition EM, bootstrap interval, and the paired
/// permutation p-value against the full pipeline. Records must be sorted
/// so per-condition score vectors stay paired by example. Exposed
/// separately so callers that post-process records (e.g. applying a
/// timeout policy) can re-derive consistent summaries.
pub fn summarize(
    records: &[EvalRecord],
    conditions: &[Condition],
    seed: u64,
) -> Result<Vec<ConditionSummary>> {
    let scores_for = |condition: Condition| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.condition == condition.to_string())
            .map(|r| r.em as f64)
            .collect()
    };
    let kvi_scores = conditions
        .iter()
        .find(|c| **c == Condition::Kvi)
        .map(|_| scores_for(Condition::Kvi));

    let mut summaries = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        let scores = scores_for(condition);
        let ci_seed = seed ^ fnv1a64(condition.as_str().as_bytes());
        let (lo, hi) =
            bootstrap_ci(&scores, DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_CI_LEVEL, ci_seed)?;
        let p_vs_kvi = match (&kvi_scores, condition) {
            (_, Condition::Kvi) | (None, _) => None,
            (Some(kvi), _) => Some(permutation_test(
                &scores,
                kvi,
                DEFAULT_PERMUTATIONS,
                seed ^ fnv1a64(format!("perm:{condition}").as_bytes()),
            )?),
        };
        summaries.push(ConditionSummary {
            condition: condition.to_string(),
            n: scores.len(),
            em_percent: scores.iter().sum::<f64>() / scores.len().max(1) as f64 * 100.0,
            ci: (lo, hi),
            p_vs_kvi,
        });
    }
    Ok(summaries)
}

pub fn write_records(records: &[EvalRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn format_em_cell(s: &ConditionSummary, best: f64) -> String {
    let em = format!("{:.1}", s.em_percent);
    let bracket = format!("[{:.1}, {:.1}]", s.ci.0, s.ci.1);
    // bold every row attaining the column maximum
    if format!("{best:.1}") == em {
        format!("**{em}** {bracket}")
    } else {
        format!("{em} {bracket}")
    }
}

/// Renders the main grid table plus ablation rows that re-present the
/// matching grid conditions (never re-run): the pipeline without injection
/// is the graph-prompt condition, the pipeline without graph guidance is
/// the query-time sentence-injection condition.
pub fn write_table(summaries: &[ConditionSummary], path: &Path) -> Result<()> {
    let best = summaries
        .iter()
        .map(|s| s.em_percent)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::new();
    out.push_str("| Condition | EM (%) | p vs kvi | n |\n");
    out.push_str("|---|---|---|---|\n");
    for s in summaries {
        let p = match s.p_vs_kvi {
            Some(p) => format!("{p:.4}"),
            None => "—".to_string(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            s.condition,
            format_em_cell(s, best),
            p,
            s.n
        ));
    }

    let find = |name: &str| summaries.iter().find(|s| s.condition == name);
    if find("kvi").is_some() {
        let ablations: [(&str, Option<&ConditionSummary>); 2] = [
            ("w/o KV injection (= graphrag)", find("graphrag")),
            ("w/o graph guidance (= kvprefix)", find("kvprefix")),
        ];
        if ablations.iter().any(|(_, s)| s.is_some()) {
            out.push_str("\nAblations, reusing the grid rows above:\n\n");
            out.push_str("| Variant | EM (%) |\n|---|---|\n");
            for (label, summary) in ablations {
                if let Some(s) = summary {
                    out.push_str(&format!("| {} | {} |\n", label, format_em_cell(s, best)));
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct StatsFile<'a> {
    bootstrap_resamples: usize,
    ci_level: f64,
    permutations: usize,
    seed: u64,
    conditions: BTreeMap<&'a str, &'a ConditionSummary>,
}

pub fn write_stats(summaries: &[ConditionSummary], seed: u64, path: &Path) -> Result<()> {
    let file = StatsFile {
        bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
        ci_level: DEFAULT_CI_LEVEL,
        permutations: DEFAULT_PERMUTATIONS,
        seed,
        conditions: summaries.iter().map(|s| (s.condition.as_str(), s)).collect(),
    };
    let out = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(out);
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    Ok(())
}

/// The retrieval result a generated question is entitled to: the edge it
/// was built from and that edge's evidence sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTrace {
    pub example_id: String,
    pub capsule_id: String,
    pub sentence_id: String,
}

/// Builds `n` relation-completion questions by cycling over graph edges in
/// order. Questions name the subject verbatim (so linking succeeds) and
/// the verbalized relation (so keyword intent rules can map it); the gold
/// answer is the object.
pub fn generate_relation_questions(
    graph: &KnowledgeGraph,
    provenance: &ProvenanceIndex,
    n: usize,
) -> Result<(Vec<QAExample>, Vec<GoldTrace>)> {
    if graph.edges().is_empty() {
        return Err(Error::InvalidInput(
            "cannot generate questions from an empty graph".into(),
        ));
    }
    let mut examples = Vec::with_capacity(n);
    let mut golds = Vec::with_capacity(n);
    for i in 0..n {
        let edge = &graph.edges()[i % graph.edges().len()];
        let example_id = format!("synth-{i:03}");
        let question = format!(
            "What does {} {}?",
            edge.subject,
            verbalize_predicate(&edge.predicate)
        );
        let sentence_id = provenance
            .triple_sentence_index
            .get(&edge.capsule_id)
            .ok_or_else(|| Error::UnknownCapsuleId {
                id: edge.capsule_id.clone(),
            })?
            .clone();
        examples.push(QAExample {
            id: example_id.clone(),
            question,
            answers: vec![edge.object.clone()],
            mode: AnswerMode::Free,
        });
        golds.push(GoldTrace {
            example_id,
            capsule_id: edge.capsule_id.clone(),
            sentence_id,
        });
    }
    Ok((examples, golds))
}
