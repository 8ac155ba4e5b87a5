//! `kvi`: compile a document corpus into a knowledge graph and KV bank,
//! answer questions under five inference conditions, and evaluate the
//! full condition grid.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use kvi_core::{
    answer_query, build_graph, compile_bank, extract_corpus, generate_relation_questions,
    load_dataset, load_graph, run_grid, save_capsules, save_dataset, save_graph, save_sentences,
    summarize, write_records, write_stats, write_table, Condition, Direction, ExtractionRuleset,
    FrozenModel, IntentRuleset, KvBank, ModelConfig, PipelineConfig, Query, QueryStores,
};

#[derive(Parser)]
#[command(
    name = "kvi",
    about = "Knowledge-capsule KV injection: compile, query, and evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract capsules from documents and compile every artifact:
    /// sentences, capsules, graph index, frozen model weights, KV bank.
    Compile(CompileArgs),
    /// Answer one question under a chosen condition; prints the answer
    /// JSON (text, kept, dropped, trace) to standard output.
    Query(QueryArgs),
    /// Run the condition grid over a dataset and write table.md,
    /// records.jsonl, and stats.json.
    Eval(EvalArgs),
    /// Generate relation-completion questions from a compiled graph.
    Synth(SynthArgs),
    /// Write the deterministic frozen model weights for a given seed.
    ExportModel(ExportModelArgs),
}

#[derive(Args)]
struct CompileArgs {
    /// Directory of UTF-8 .txt documents; the file stem becomes the doc id
    #[arg(long)]
    docs: PathBuf,
    /// Extraction ruleset JSON: [{"phrases": [...], "predicate": "..."}]
    #[arg(long)]
    rules: PathBuf,
    /// Optional entity -> type hint map used for anchor statements
    #[arg(long)]
    entity_types: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Model weight seed
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Drop the audit text section from the bank file; query behavior is
    /// unaffected
    #[arg(long)]
    strip_text: bool,
}

#[derive(Args)]
struct StoreArgs {
    /// Graph index produced by `kvi compile`
    #[arg(long)]
    graph: PathBuf,
    /// KV bank produced by `kvi compile`
    #[arg(long)]
    bank: PathBuf,
    /// Frozen model weights; defaults to model.bin next to the bank
    #[arg(long)]
    model: Option<PathBuf>,
    /// Intent rule table JSON: [{"match": ..., "relations": [...]}];
    /// defaults to mapping every query to all relations
    #[arg(long)]
    intent_rules: Option<PathBuf>,
}

#[derive(Args)]
struct RetrievalArgs {
    /// Traversal depth from the linked entity
    #[arg(long, default_value_t = 2)]
    hops: usize,
    /// Evidence sentences placed in the prompt
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// Maximum triple entries injected as KV prefix
    #[arg(long, default_value_t = 8)]
    kv_budget: usize,
    /// Layers receiving external KV: "all", "0-1", or "0,2"
    #[arg(long, default_value = "all")]
    layers: String,
    /// Minimum relevance for a candidate to survive ranking
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
    /// Traversal direction: "outgoing" or "both"
    #[arg(long, default_value = "outgoing")]
    direction: String,
    /// Grounding filter threshold in [0,1]
    #[arg(long, default_value_t = 0.3)]
    ground_thresh: f64,
    /// Apply the grounding filter to the plain-generation condition too
    #[arg(long)]
    ground_all: bool,
    /// Generation budget in tokens
    #[arg(long, default_value_t = 32)]
    max_new: usize,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Inference condition: llm, rag, graphrag, kvprefix, or kvi
    #[arg(long, default_value = "kvi")]
    condition: Condition,
    /// Statistics seed recorded alongside results
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// The question to answer
    question: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// JSONL dataset: {"id", "question", "answers", "mode"?}
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated condition list
    #[arg(long, default_value = "llm,rag,graphrag,kvprefix,kvi")]
    conditions: String,
    /// Output directory for table.md, records.jsonl, stats.json
    #[arg(long)]
    out: PathBuf,
    /// Seed for bootstrap and permutation statistics
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optional per-example wall-clock budget; cells that ran longer are
    /// re-marked em=0 after the fact (this makes results timing-dependent,
    /// so reruns are no longer byte-identical)
    #[arg(long)]
    timeout_ms: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Graph index to generate questions from
    #[arg(long)]
    graph: PathBuf,
    /// Number of questions (edges are cycled in order)
    #[arg(long, default_value_t = 40)]
    count: usize,
    /// Output JSONL dataset path
    #[arg(long)]
    out: PathBuf,
    /// Optional path for the gold retrieval targets of each question
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Args)]
struct ExportModelArgs {
    /// Model weight seed
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output weight file
    #[arg(long)]
    out: PathBuf,
}

fn parse_layers(input: &str) -> Result<Option<BTreeSet<usize>>> {
    let input = input.trim();
    if input.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let mut layers = BTreeSet::new();
    for part in input.split(',') {
        let part = part.trim();
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: usize = lo.trim().parse().with_context(|| format!("bad layer range start in {part:?}"))?;
            let hi: usize = hi.trim().parse().with_context(|| format!("bad layer range end in {part:?}"))?;
            if lo > hi {
                bail!("layer range {part:?} runs backwards");
            }
            layers.extend(lo..=hi);
        } else {
            let layer: usize = part.parse().with_context(|| format!("bad layer index {part:?}"))?;
            layers.insert(layer);
        }
    }
    if layers.is_empty() {
        bail!("--layers {input:?} selects no layers; use \"all\" or indices like \"0-1\"");
    }
    Ok(Some(layers))
}

fn parse_direction(input: &str) -> Result<Direction> {
    match input.trim().to_ascii_lowercase().as_str() {
        "outgoing" => Ok(Direction::OutgoingOnly),
        "both" | "bidirectional" => Ok(Direction::Bidirectional),
        other => bail!("unknown --direction {other:?}; expected \"outgoing\" or \"both\""),
    }
}

fn parse_conditions(input: &str) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for part in input.split(',') {
        let condition: Condition = part
            .trim()
            .parse()
            .map_err(|e: kvi_core::Error| anyhow::anyhow!(e))?;
        if out.contains(&condition) {
            bail!("condition {condition} listed twice");
        }
        out.push(condition);
    }
    if out.is_empty() {
        bail!("--conditions selects nothing");
    }
    Ok(out)
}

fn pipeline_config(retrieval: &RetrievalArgs, seed: u64) -> Result<PipelineConfig> {
    if !(0.0..=1.0).contains(&retrieval.ground_thresh) {
        bail!("--ground-thresh must lie in [0,1]");
    }
    Ok(PipelineConfig {
        hops: retrieval.hops,
        topk: retrieval.topk,
        kv_budget: retrieval.kv_budget,
        layer_mask: parse_layers(&retrieval.layers)?,
        ground_thresh: retrieval.ground_thresh,
        ground_all: retrieval.ground_all,
        max_new: retrieval.max_new,
        direction: parse_direction(&retrieval.direction)?,
        min_score: retrieval.min_score,
        seed,
        ..PipelineConfig::default()
    })
}

/// Owns the loaded artifacts so QueryStores can borrow them.
struct LoadedStores {
    graph: kvi_core::KnowledgeGraph,
    provenance: kvi_core::ProvenanceIndex,
    bank: KvBank,
    model: FrozenModel,
    intent_rules: IntentRuleset,
}

impl LoadedStores {
    fn load(args: &StoreArgs) -> Result<Self> {
        let (graph, provenance) = load_graph(&args.graph)
            .with_context(|| format!("loading graph index {}", args.graph.display()))?;
        let model_path = match &args.model {
            Some(p) => p.clone(),
            None => args
                .bank
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("model.bin"),
        };
        let model = FrozenModel::load_weights(&model_path)
            .with_context(|| format!("loading model weights {}", model_path.display()))?;
        let bank = KvBank::load(&args.bank, &model)
            .with_context(|| format!("loading KV bank {}", args.bank.display()))?;
        let intent_rules = match &args.intent_rules {
            Some(p) => IntentRuleset::load(p)
                .with_context(|| format!("loading intent rules {}", p.display()))?,
            None => IntentRuleset::default(),
        };
        Ok(LoadedStores {
            graph,
            provenance,
            bank,
            model,
            intent_rules,
        })
    }

    fn stores(&self) -> QueryStores<'_> {
        QueryStores {
            graph: &self.graph,
            provenance: &self.provenance,
            bank: &self.bank,
            model: &self.model,
            intent_rules: &self.intent_rules,
        }
    }
}

fn run_compile(args: &CompileArgs) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.docs)
        .with_context(|| format!("reading docs directory {}", args.docs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no .txt documents found in {}", args.docs.display());
    }
    let mut documents = Vec::with_capacity(entries.len());
    for path in &entries {
        let doc_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("non-UTF-8 document name {}", path.display()))?
            .to_string();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        documents.push((doc_id, text));
    }

    let ruleset = ExtractionRuleset::load(&args.rules)
        .with_context(|| format!("loading extraction rules {}", args.rules.display()))?;
    let type_hints: BTreeMap<String, String> = match &args.entity_types {
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .with_context(|| format!("reading entity types {}", p.display()))?;
            serde_json::from_str(&raw)
                .with_context(|| format!("parsing entity types {}", p.display()))?
        }
        None => BTreeMap::new(),
    };

    let (sentences, capsules) = extract_corpus(&documents, &ruleset)?;
    let (graph, provenance) = build_graph(&capsules, &sentences)?;
    let model = FrozenModel::init(ModelConfig {
        seed: args.seed,
        ..ModelConfig::default()
    })?;
    let bank = compile_bank(&graph, &capsules, &type_hints, &model)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    save_sentences(&sentences, &args.out.join("sentences.json"))?;
    save_capsules(&capsules, &args.out.join("capsules.json"))?;
    save_graph(&graph, &provenance, &args.out.join("graph_index.json"))?;
    model.save_weights(&args.out.join("model.bin"))?;
    bank.save(&args.out.join("kv_bank.bin"), !args.strip_text)?;

    println!(
        "compiled {} documents -> {} sentences, {} capsules, {} nodes, {} bank entries",
        documents.len(),
        sentences.len(),
        capsules.iter().count(),
        graph.node_count(),
        bank.len(),
    );
    println!("model fingerprint {}", model.fingerprint_hex());
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn run_query(args: &QueryArgs) -> Result<()> {
    let loaded = LoadedStores::load(&args.stores)?;
    let config = pipeline_config(&args.retrieval, args.seed)?;
    let query = Query::new(args.question.clone())?;
    let answer = answer_query(&query, &loaded.stores(), &config, args.condition)?;
    println!("{}", serde_json::to_string_pretty(&answer)?);
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let loaded = LoadedStores::load(&args.stores)?;
    let config = pipeline_config(&args.retrieval, args.seed)?;
    let conditions = parse_conditions(&args.conditions)?;
    let dataset = load_dataset(&args.dataset)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    if dataset.is_empty() {
        bail!("dataset {} holds no examples", args.dataset.display());
    }

    let mut grid = run_grid(&dataset, &conditions, &loaded.stores(), &config)?;
    if let Some(budget_ms) = args.timeout_ms {
        let mut timed_out = 0usize;
        for record in &mut grid.records {
            if record.error.is_none() && record.latency_ms > budget_ms {
                record.em = 0;
                record.prediction.clear();
                record.error = Some(format!(
                    "exceeded per-example budget of {budget_ms} ms ({:.1} ms)",
                    record.latency_ms
                ));
                timed_out += 1;
            }
        }
        if timed_out > 0 {
            grid.summaries = summarize(&grid.records, &conditions, config.seed)?;
            eprintln!("{timed_out} cells exceeded the {budget_ms} ms budget");
        }
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    write_records(&grid.records, &args.out.join("records.jsonl"))?;
    write_table(&grid.summaries, &args.out.join("table.md"))?;
    write_stats(&grid.summaries, config.seed, &args.out.join("stats.json"))?;

    for summary in &grid.summaries {
        println!(
            "{:<9} EM {:5.1}% [{:.1}, {:.1}] n={}",
            summary.condition, summary.em_percent, summary.ci.0, summary.ci.1, summary.n
        );
    }
    println!("results written to {}", args.out.display());
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let (graph, provenance) = load_graph(&args.graph)
        .with_context(|| format!("loading graph index {}", args.graph.display()))?;
    let (examples, golds) = generate_relation_questions(&graph, &provenance, args.count)?;
    save_dataset(&examples, &args.out)?;
    if let Some(gold_path) = &args.gold {
        let json = serde_json::to_string_pretty(&golds)?;
        std::fs::write(gold_path, json + "\n")?;
    }
    println!("wrote {} questions to {}", examples.len(), args.out.display());
    Ok(())
}

fn run_export_model(args: &ExportModelArgs) -> Result<()> {
    let model = FrozenModel::init(ModelConfig {
        seed: args.seed,
        ..ModelConfig::default()
    })?;
    model.save_weights(&args.out)?;
    println!("model fingerprint {}", model.fingerprint_hex());
    println!("weights written to {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Compile(args) => run_compile(args),
        Command::Query(args) => run_query(args),
        Command::Eval(args) => run_eval(args),
        Command::Synth(args) => run_synth(args),
        Command::ExportModel(args) => run_export_model(args),
    }
}
