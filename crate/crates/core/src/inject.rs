//! Dual-channel knowledge injection and grounded generation: the prompt
//! channel carries raw evidence sentences, the attention channel carries
//! precompiled key/value entries spliced before prompt-derived slots, and a
//! post-generation filter drops output sentences with no footing in the
//! evidence. The five inference conditions are variations over which
//! channels are active.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::bank::{compile_sentence, compose_entries, compose_prefix, KvBank, PrefixKV};
use crate::capsule::segment_sentences;
use crate::error::{Error, Result};
use crate::graph::{traverse, Direction, KnowledgeGraph, ProvenanceIndex, TraversalConfig};
use crate::model::{detokenize, tokenize, FrozenModel, LayerKV};
use crate::retrieval::{
    classify_intent, content_tokens, dense_retrieve, link_entity, score_candidates, select_topk,
    IntentRuleset, Query, ScoredTriple,
};

/// The five inference conditions of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    /// Plain generation, no retrieval.
    Llm,
    /// Dense-retrieved sentences in the prompt.
    Rag,
    /// Graph-retrieved sentences in the prompt (injection ablated).
    GraphRag,
    /// Dense-retrieved sentences compiled to KV at query time; prompt
    /// carries the query only (graph ablated).
    KvPrefix,
    /// Anchor plus ranked triple entries injected, graph evidence in the
    /// prompt (both channels).
    Kvi,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Llm,
        Condition::Rag,
        Condition::GraphRag,
        Condition::KvPrefix,
        Condition::Kvi,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Llm => "llm",
            Condition::Rag => "rag",
            Condition::GraphRag => "graphrag",
            Condition::KvPrefix => "kvprefix",
            Condition::Kvi => "kvi",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm" => Ok(Condition::Llm),
            "rag" => Ok(Condition::Rag),
            "graphrag" => Ok(Condition::GraphRag),
            "kvprefix" => Ok(Condition::KvPrefix),
            "kvi" => Ok(Condition::Kvi),
            other => Err(Error::InvalidInput(format!(
                "unknown condition {other:?}; expected llm|rag|graphrag|kvprefix|kvi"
            ))),
        }
    }
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Evidence: {evidence}\nQuestion: {query}\nAnswer:";

/// Knobs for one pipeline run. Defaults mirror the command-line defaults.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Traversal depth from the linked entity.
    pub hops: usize,
    /// Evidence sentences placed in the prompt.
    pub topk: usize,
    /// Maximum triple entries injected ahead of the anchor's prompt.
    pub kv_budget: usize,
    /// Layers receiving external KV; `None` = all layers.
    pub layer_mask: Option<BTreeSet<usize>>,
    /// Grounding filter threshold over content-token overlap.
    pub ground_thresh: f64,
    /// Apply the grounding filter to the plain-generation condition too.
    pub ground_all: bool,
    /// Greedy decoding budget.
    pub max_new: usize,
    /// Rotate injected keys onto a coherent position stream.
    pub reposition: bool,
    /// Traversal edge direction.
    pub direction: Direction,
    /// Drop candidates scoring below this before ranking.
    pub min_score: f64,
    /// Prompt template with `{evidence}` and `{query}` placeholders.
    pub prompt_template: String,
    /// Seed for downstream statistics; generation itself is deterministic.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hops: 2,
            topk: 5,
            kv_budget: 8,
            layer_mask: None,
            ground_thresh: 0.3,
            ground_all: false,
            max_new: 32,
            reposition: true,
            direction: Direction::OutgoingOnly,
            min_score: 0.0,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            seed: 7,
        }
    }
}

/// Everything needed to run one injected generation.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub prefix: PrefixKV,
    pub layer_mask: BTreeSet<usize>,
    pub prompt_text: String,
    pub prompt_tokens: Vec<u32>,
    /// Uniform position offset for prompt tokens — the prefix length, on
    /// every layer, so one position stream is coherent across layers even
    /// when only some receive external entries.
    pub prompt_position_offset: usize,
}

/// Raw generation result plus the instrumentation the separation and
/// ordering checks need.
#[derive(Debug)]
pub struct InjectionOutcome {
    pub text: String,
    pub tokens: Vec<u32>,
    /// Accumulated per-layer attention memory after decoding: external
    /// slots (on injected layers), then prompt slots, then emitted tokens.
    pub final_cache: Vec<LayerKV>,
    /// Per layer, how many external slots precede the prompt-derived slots.
    pub external_lens: Vec<usize>,
}

/// What the pipeline saw and chose; identical across conditions that share
/// retrieval, regardless of which channel delivered the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub linked_entity: Option<String>,
    pub relation_set: Vec<String>,
    pub ranked: Vec<RankedTriple>,
    pub prompt_evidence: Vec<String>,
    pub injected: Vec<String>,
}

impl Trace {
    fn empty() -> Self {
        Trace {
            linked_entity: None,
            relation_set: Vec::new(),
            ranked: Vec::new(),
            prompt_evidence: Vec::new(),
            injected: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriple {
    pub capsule_id: String,
    pub score: f64,
    pub evidence_sentence_id: String,
    pub hop: usize,
}

impl From<&ScoredTriple> for RankedTriple {
    fn from(st: &ScoredTriple) -> Self {
        RankedTriple {
            capsule_id: st.capsule_id.clone(),
            score: st.score,
            evidence_sentence_id: st.evidence_sentence_id.clone(),
            hop: st.hop,
        }
    }
}

/// The grounded answer: kept sentences joined by single spaces, with the
/// dropped remainder and the full decision trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    #[serde(rename = "kept")]
    pub kept_sentences: Vec<String>,
    #[serde(rename = "dropped")]
    pub dropped_sentences: Vec<String>,
    pub trace: Trace,
}

/// Immutable stores shared by concurrent queries.
#[derive(Clone, Copy)]
pub struct QueryStores<'a> {
    pub graph: &'a KnowledgeGraph,
    pub provenance: &'a ProvenanceIndex,
    pub bank: &'a KvBank,
    pub model: &'a FrozenModel,
    pub intent_rules: &'a IntentRuleset,
}

/// Renders the prompt channel: raw evidence sentences and the query slotted
/// into the template. The compiled canonical statements never pass through
/// here — that is the other channel's cargo.
pub fn build_prompt(
    evidence_sentences: &[String],
    query_text: &str,
    template: &str,
    token_budget: usize,
) -> Result<(String, Vec<u32>)> {
    if !template.contains("{evidence}") || !template.contains("{query}") {
        return Err(Error::Config(
            "prompt template must contain {evidence} and {query} placeholders".into(),
        ));
    }
    let rendered = template
        .replace("{evidence}", &evidence_sentences.join(" "))
        .replace("{query}", query_text);
    let tokens = tokenize(&rendered);
    if tokens.len() > token_budget {
        return Err(Error::InvalidInput(format!(
            "prompt needs {} tokens but only {} fit; reduce evidence count (topk) or prefix size",
            tokens.len(),
            token_budget
        )));
    }
    Ok((rendered, tokens))
}

fn resolve_layer_mask(
    mask: &Option<BTreeSet<usize>>,
    num_layers: usize,
    prefix_nonempty: bool,
) -> Result<BTreeSet<usize>> {
    let resolved = match mask {
        None => (0..num_layers).collect(),
        Some(m) => m.clone(),
    };
    if let Some(&bad) = resolved.iter().find(|&&l| l >= num_layers) {
        return Err(Error::Config(format!(
            "layer_mask names layer {bad}, model has {num_layers}"
        )));
    }
    if prefix_nonempty && resolved.is_empty() {
        return Err(Error::Config(
            "layer_mask is empty but an external prefix is present".into(),
        ));
    }
    Ok(resolved)
}

/// Decodes with the plan's prefix spliced before prompt-derived entries on
/// every masked layer. Non-masked layers see prompt entries only, but the
/// prompt still occupies positions after the prefix on all layers.
pub fn inject_and_generate(
    plan: &InjectionPlan,
    model: &FrozenModel,
    max_new: usize,
) -> Result<InjectionOutcome> {
    let cfg = model.config();
    let mask = resolve_layer_mask(
        &Some(plan.layer_mask.clone()),
        cfg.num_layers,
        plan.prefix.token_len > 0,
    )?;

    let mut past = Vec::with_capacity(cfg.num_layers);
    let mut external_lens = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        if mask.contains(&l) {
            past.push(plan.prefix.layers[l].clone());
            external_lens.push(plan.prefix.layers[l].seq_len());
        } else {
            past.push(LayerKV::empty(cfg.num_heads, cfg.head_dim));
            external_lens.push(0);
        }
    }

    let out = model.generate(
        &plan.prompt_tokens,
        Some(past),
        plan.prompt_position_offset,
        max_new,
    )?;
    Ok(InjectionOutcome {
        text: detokenize(&out.tokens),
        tokens: out.tokens,
        final_cache: out.cache,
        external_lens,
    })
}

/// Splits generated text into sentences and keeps those whose content
/// tokens overlap some evidence sentence at or above the threshold.
/// Sentences with no content tokens pass (nothing to ground).
pub fn grounding_filter(
    generated_text: &str,
    evidence_texts: &[String],
    threshold: f64,
) -> (Vec<String>, Vec<String>) {
    let evidence_tokens: Vec<BTreeSet<String>> =
        evidence_texts.iter().map(|t| content_tokens(t)).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for sentence in segment_sentences(generated_text, "generated") {
        let gen_tokens = content_tokens(&sentence.text);
        let keep = if gen_tokens.is_empty() {
            true
        } else {
            let best: f64 = evidence_tokens
                .iter()
                .map(|ev| gen_tokens.intersection(ev).count() as f64 / gen_tokens.len() as f64)
                .fold(0.0, f64::max);
            best >= threshold
        };
        if keep {
            kept.push(sentence.text);
        } else {
            dropped.push(sentence.text);
        }
    }
    (kept, dropped)
}

fn finish_answer(
    raw_text: &str,
    evidence_texts: &[String],
    apply_filter: bool,
    threshold: f64,
    trace: Trace,
) -> Answer {
    let (kept, dropped) = if apply_filter {
        grounding_filter(raw_text, evidence_texts, threshold)
    } else {
        let all = segment_sentences(raw_text, "generated")
            .into_iter()
            .map(|s| s.text)
            .collect();
        (all, Vec::new())
    };
    Answer {
        text: kept.join(" "),
        kept_sentences: kept,
        dropped_sentences: dropped,
        trace,
    }
}

struct GraphRetrieval {
    trace_entity: String,
    relation_set: BTreeSet<String>,
    ranked: Vec<ScoredTriple>,
    prompt_sentence_ids: Vec<String>,
    prompt_sentence_texts: Vec<String>,
}

/// Shared retrieval for the graph-guided conditions: link, classify,
/// traverse, score, rank; prompt evidence is the top sentences after
/// de-duplicating capsules that share provenance.
fn graph_retrieve(
    query: &Query,
    stores: &QueryStores<'_>,
    config: &PipelineConfig,
) -> Result<Option<GraphRetrieval>> {
    let Some(entity) = link_entity(&query.text, stores.graph) else {
        return Ok(None);
    };
    let relation_set = classify_intent(&query.text, stores.intent_rules, &stores.graph.relations());
    let traversal = TraversalConfig::new(config.hops, relation_set.clone(), config.direction)?;
    let candidates = traverse(stores.graph, &entity, &traversal)?;
    let mut scored = score_candidates(&query.text, &candidates, stores.provenance)?;
    scored.retain(|s| s.score >= config.min_score);
    let total = scored.len();
    let ranked = select_topk(scored, total);

    let mut prompt_sentence_ids = Vec::new();
    let mut prompt_sentence_texts = Vec::new();
    for st in &ranked {
        if prompt_sentence_ids.len() == config.topk {
            break;
        }
        if prompt_sentence_ids.contains(&st.evidence_sentence_id) {
            continue;
        }
        let sentence = stores.provenance.resolve_provenance(&st.capsule_id)?;
        prompt_sentence_ids.push(sentence.sentence_id);
        prompt_sentence_texts.push(sentence.text);
    }

    Ok(Some(GraphRetrieval {
        trace_entity: entity,
        relation_set,
        ranked,
        prompt_sentence_ids,
        prompt_sentence_texts,
    }))
}

fn prompt_budget(model: &FrozenModel, prefix_len: usize, max_new: usize) -> usize {
    model
        .config()
        .max_positions
        .saturating_sub(prefix_len + max_new)
}

/// Runs one query under one condition, end to end.
pub fn answer_query(
    query: &Query,
    stores: &QueryStores<'_>,
    config: &PipelineConfig,
    condition: Condition,
) -> Result<Answer> {
    match condition {
        Condition::Llm => run_plain(query, stores, config),
        Condition::Rag => run_rag(query, stores, config),
        Condition::GraphRag => run_graph_prompt(query, stores, config, false),
        Condition::Kvi => run_graph_prompt(query, stores, config, true),
        Condition::KvPrefix => run_kv_prefix(query, stores, config),
    }
}

fn run_plain(query: &Query, stores: &QueryStores<'_>, config: &PipelineConfig) -> Result<Answer> {
    let budget = prompt_budget(stores.model, 0, config.max_new);
    let (_, prompt_tokens) = build_prompt(&[], &query.text, &config.prompt_template, budget)?;
    let out = stores
        .model
        .generate(&prompt_tokens, None, 0, config.max_new)?;
    let raw = detokenize(&out.tokens);
    Ok(finish_answer(
        &raw,
        &[],
        config.ground_all,
        config.ground_thresh,
        Trace::empty(),
    ))
}

fn run_rag(query: &Query, stores: &QueryStores<'_>, config: &PipelineConfig) -> Result<Answer> {
    let sentences = stores.provenance.sentences();
    let evidence = dense_retrieve(&query.text, &sentences, config.topk);
    let texts: Vec<String> = evidence.iter().map(|s| s.text.clone()).collect();
    let budget = prompt_budget(stores.model, 0, config.max_new);
    let (_, prompt_tokens) = build_prompt(&texts, &query.text, &config.prompt_template, budget)?;
    let out = stores
        .model
        .generate(&prompt_tokens, None, 0, config.max_new)?;
    let raw = detokenize(&out.tokens);
    let trace = Trace {
        prompt_evidence: evidence.iter().map(|s| s.sentence_id.clone()).collect(),
        ..Trace::empty()
    };
    Ok(finish_answer(&raw, &texts, true, config.ground_thresh, trace))
}

fn run_graph_prompt(
    query: &Query,
    stores: &QueryStores<'_>,
    config: &PipelineConfig,
    inject: bool,
) -> Result<Answer> {
    let Some(retrieval) = graph_retrieve(query, stores, config)? else {
        // no entity in the query: degrade to plain generation
        return run_plain(query, stores, config);
    };

    let mut trace = Trace {
        linked_entity: Some(retrieval.trace_entity.clone()),
        relation_set: retrieval.relation_set.iter().cloned().collect(),
        ranked: retrieval.ranked.iter().map(RankedTriple::from).collect(),
        prompt_evidence: retrieval.prompt_sentence_ids.clone(),
        injected: Vec::new(),
    };

    let prefix = if inject {
        let capsule_ids: Vec<String> = retrieval
            .ranked
            .iter()
            .take(config.kv_budget)
            .map(|s| s.capsule_id.clone())
            .collect();
        compose_prefix(
            stores.bank,
            &retrieval.trace_entity,
            &capsule_ids,
            config.reposition,
            stores.model,
        )?
    } else {
        PrefixKV::empty(stores.model)
    };
    trace.injected = prefix.entry_ids.clone();

    let budget = prompt_budget(stores.model, prefix.token_len, config.max_new);
    let (prompt_text, prompt_tokens) = build_prompt(
        &retrieval.prompt_sentence_texts,
        &query.text,
        &config.prompt_template,
        budget,
    )?;

    let raw = if inject {
        let plan = InjectionPlan {
            prompt_position_offset: prefix.token_len,
            prefix,
            layer_mask: resolve_layer_mask(
                &config.layer_mask,
                stores.model.config().num_layers,
                true,
            )?,
            prompt_text,
            prompt_tokens,
        };
        inject_and_generate(&plan, stores.model, config.max_new)?.text
    } else {
        let out = stores
            .model
            .generate(&prompt_tokens, None, 0, config.max_new)?;
        detokenize(&out.tokens)
    };

    Ok(finish_answer(
        &raw,
        &retrieval.prompt_sentence_texts,
        true,
        config.ground_thresh,
        trace,
    ))
}

fn run_kv_prefix(
    query: &Query,
    stores: &QueryStores<'_>,
    config: &PipelineConfig,
) -> Result<Answer> {
    let sentences = stores.provenance.sentences();
    let evidence = dense_retrieve(&query.text, &sentences, config.topk);
    let entries: Vec<_> = evidence
        .iter()
        .map(|s| compile_sentence(&s.sentence_id, &s.text, stores.model))
        .collect::<Result<_>>()?;
    let entry_refs: Vec<&_> = entries.iter().collect();
    let prefix = compose_entries(&entry_refs, config.reposition, stores.model)?;

    let trace = Trace {
        injected: prefix.entry_ids.clone(),
        ..Trace::empty()
    };

    let budget = prompt_budget(stores.model, prefix.token_len, config.max_new);
    let (prompt_text, prompt_tokens) =
        build_prompt(&[], &query.text, &config.prompt_template, budget)?;
    let plan = InjectionPlan {
        prompt_position_offset: prefix.token_len,
        layer_mask: resolve_layer_mask(&config.layer_mask, stores.model.config().num_layers, true)?,
        prefix,
        prompt_text,
        prompt_tokens,
    };
    let out = inject_and_generate(&plan, stores.model, config.max_new)?;

    let texts: Vec<String> = evidence.iter().map(|s| s.text.clone()).collect();
    Ok(finish_answer(
        &out.text,
        &texts,
        true,
        config.ground_thresh,
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::compile_bank;
    use crate::capsule::{extract_corpus, CapsuleSet, ExtractionRule, ExtractionRuleset, Sentence};
    use crate::graph::build_graph;
    use crate::model::ModelConfig;
    use crate::retrieval::IntentRule;
    use std::collections::BTreeMap;

    struct Fixture {
        graph: KnowledgeGraph,
        provenance: ProvenanceIndex,
        capsules: CapsuleSet,
        bank: KvBank,
        model: FrozenModel,
        intent_rules: IntentRuleset,
    }

    impl Fixture {
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

    fn fixture() -> Fixture {
        let ruleset = ExtractionRuleset::new(vec![
            ExtractionRule {
                phrases: vec![
                    "frequently presents with".into(),
                    "often presents with".into(),
                ],
                predicate: "has_symptom".into(),
            },
            ExtractionRule {
                phrases: vec!["ultimately causes".into()],
                predicate: "causes".into(),
            },
        ])
        .unwrap();
        let docs = vec![(
            "sftsv".to_string(),
            "SFTSV infection frequently presents with fever. \
             SFTSV infection often presents with thrombocytopenia. \
             SFTSV infection ultimately causes multi-organ failure."
                .to_string(),
        )];
        let (sentences, capsules) = extract_corpus(&docs, &ruleset).unwrap();
        let (graph, provenance) = build_graph(&capsules, &sentences).unwrap();
        let model = FrozenModel::init(ModelConfig::default()).unwrap();
        let hints = BTreeMap::from([(
            "SFTSV infection".to_string(),
            "viral disease".to_string(),
        )]);
        let bank = compile_bank(&graph, &capsules, &hints, &model).unwrap();
        let intent_rules = IntentRuleset {
            rules: vec![
                IntentRule {
                    pattern: "symptom".into(),
                    relations: vec!["has_symptom".into(), "causes".into()],
                },
                IntentRule {
                    pattern: ".*".into(),
                    relations: vec![],
                },
            ],
        };
        Fixture {
            graph,
            provenance,
            capsules,
            bank,
            model,
            intent_rules,
        }
    }

    #[test]
    fn condition_strings_round_trip() {
        for c in Condition::ALL {
            assert_eq!(Condition::from_str(c.as_str()).unwrap(), c);
        }
        assert!(Condition::from_str("graph-rag").is_err());
    }

    #[test]
    fn template_requires_placeholders() {
        assert!(matches!(
            build_prompt(&[], "q", "no placeholders", 100),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prompt_renders_evidence_verbatim() {
        let ev = vec!["SFTSV infection frequently presents with fever.".to_string()];
        let (text, tokens) =
            build_prompt(&ev, "what?", DEFAULT_PROMPT_TEMPLATE, 1000).unwrap();
        assert!(text.contains(&ev[0]));
        assert!(text.contains("Question: what?"));
        assert_eq!(tokens, tokenize(&text));
    }

    #[test]
    fn prompt_budget_overflow_mentions_topk() {
        let ev = vec!["long evidence sentence".to_string()];
        let err = build_prompt(&ev, "q", DEFAULT_PROMPT_TEMPLATE, 10).unwrap_err();
        assert!(err.to_string().contains("topk"), "{err}");
    }

    #[test]
    fn grounding_threshold_zero_keeps_everything() {
        let (kept, dropped) = grounding_filter("Alpha beta. Gamma delta.", &[], 0.0);
        assert_eq!(kept.len(), 2);
        assert!(dropped.is_empty());
    }

    #[test]
    fn grounding_verbatim_kept_paraphrase_dropped_at_one() {
        let evidence = vec!["SFTSV infection frequently presents with fever.".to_string()];
        let text = "SFTSV infection frequently presents with fever. \
                    SFTSV infection presents with chills.";
        let (kept, dropped) = grounding_filter(text, &evidence, 1.0);
        assert_eq!(kept, vec!["SFTSV infection frequently presents with fever."]);
        assert_eq!(dropped.len(), 1);
        assert!(dropped[0].contains("chills"));
    }

    #[test]
    fn grounding_empty_text_is_empty() {
        let (kept, dropped) = grounding_filter("", &["evidence".to_string()], 0.5);
        assert!(kept.is_empty() && dropped.is_empty());
    }

    #[test]
    fn grounding_contentless_sentence_passes() {
        let (kept, _) = grounding_filter("Is it?", &["unrelated evidence".to_string()], 0.9);
        assert_eq!(kept, vec!["Is it?"]);
    }

    #[test]
    fn empty_prefix_is_neutral() {
        let f = fixture();
        let prompt = "Question: anything?\nAnswer:";
        let plan = InjectionPlan {
            prefix: PrefixKV::empty(&f.model),
            layer_mask: (0..4).collect(),
            prompt_text: prompt.to_string(),
            prompt_tokens: tokenize(prompt),
            prompt_position_offset: 0,
        };
        let injected = inject_and_generate(&plan, &f.model, 16).unwrap();
        let plain = f.model.generate(&tokenize(prompt), None, 0, 16).unwrap();
        assert_eq!(injected.tokens, plain.tokens);
    }

    #[test]
    fn single_entry_injection_equals_concat_generation() {
        let f = fixture();
        let anchor = f.bank.anchor_for("SFTSV infection").unwrap();
        let prefix = compose_entries(&[anchor], true, &f.model).unwrap();
        let prompt = "Question: what is it?\nAnswer:";
        let plan = InjectionPlan {
            prompt_position_offset: prefix.token_len,
            prefix,
            layer_mask: (0..4).collect(),
            prompt_text: prompt.to_string(),
            prompt_tokens: tokenize(prompt),
        };
        let injected = inject_and_generate(&plan, &f.model, 24).unwrap();

        let concat = [
            tokenize(anchor.canonical_text.as_ref().unwrap()),
            tokenize(prompt),
        ]
        .concat();
        let oracle = f.model.generate(&concat, None, 0, 24).unwrap();
        assert_eq!(injected.tokens, oracle.tokens);
    }

    #[test]
    fn injected_layers_start_with_external_slots() {
        let f = fixture();
        let ids: Vec<String> = f.capsules.iter().map(|c| c.capsule_id.clone()).collect();
        let prefix = compose_prefix(&f.bank, "SFTSV infection", &ids, true, &f.model).unwrap();
        let mask: BTreeSet<usize> = [0, 2].into_iter().collect();
        let plan = InjectionPlan {
            prompt_position_offset: prefix.token_len,
            prefix: prefix.clone(),
            layer_mask: mask.clone(),
            prompt_text: "Q".into(),
            prompt_tokens: tokenize("Q"),
        };
        let out = inject_and_generate(&plan, &f.model, 4).unwrap();
        for l in 0..4 {
            if mask.contains(&l) {
                assert_eq!(out.external_lens[l], prefix.token_len);
                let cached = &out.final_cache[l];
                let ext = cached.keys.slice(ndarray::s![.., ..prefix.token_len, ..]);
                assert_eq!(ext, prefix.layers[l].keys.view());
            } else {
                assert_eq!(out.external_lens[l], 0);
            }
        }
    }

    #[test]
    fn layer_mask_bounds_checked() {
        let f = fixture();
        let anchor = f.bank.anchor_for("fever").unwrap();
        let prefix = compose_entries(&[anchor], true, &f.model).unwrap();
        let plan = InjectionPlan {
            prompt_position_offset: prefix.token_len,
            prefix,
            layer_mask: [9].into_iter().collect(),
            prompt_text: "Q".into(),
            prompt_tokens: tokenize("Q"),
        };
        assert!(matches!(
            inject_and_generate(&plan, &f.model, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_mask_with_prefix_rejected() {
        let f = fixture();
        let anchor = f.bank.anchor_for("fever").unwrap();
        let prefix = compose_entries(&[anchor], true, &f.model).unwrap();
        let plan = InjectionPlan {
            prompt_position_offset: prefix.token_len,
            prefix,
            layer_mask: BTreeSet::new(),
            prompt_text: "Q".into(),
            prompt_tokens: tokenize("Q"),
        };
        assert!(inject_and_generate(&plan, &f.model, 2).is_err());
    }

    #[test]
    fn kvi_trace_is_anchor_first_within_budget() {
        let f = fixture();
        let config = PipelineConfig {
            kv_budget: 2,
            ..Default::default()
        };
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        let answer = answer_query(&query, &f.stores(), &config, Condition::Kvi).unwrap();
        let injected = &answer.trace.injected;
        assert!(injected[0].starts_with("anchor:SFTSV infection"));
        assert!(injected.len() <= 1 + config.kv_budget);
        assert!(injected[1..].iter().all(|id| id.starts_with("triple:")));
        assert_eq!(answer.trace.linked_entity.as_deref(), Some("SFTSV infection"));
        // ranked triples follow trace order
        for (inj, ranked) in injected[1..].iter().zip(&answer.trace.ranked) {
            assert_eq!(inj, &format!("triple:{}", ranked.capsule_id));
        }
    }

    #[test]
    fn kvi_prompt_never_carries_canonical_text() {
        let f = fixture();
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        let stores = f.stores();
        let config = PipelineConfig::default();
        let answer = answer_query(&query, &stores, &config, Condition::Kvi).unwrap();
        assert!(!answer.trace.injected.is_empty());

        let retrieval = graph_retrieve(&query, &stores, &config).unwrap().unwrap();
        let (prompt_text, _) = build_prompt(
            &retrieval.prompt_sentence_texts,
            &query.text,
            DEFAULT_PROMPT_TEMPLATE,
            10_000,
        )
        .unwrap();
        for id in &answer.trace.injected {
            let canonical = f.bank.get(id).unwrap().canonical_text.as_ref().unwrap();
            assert!(
                !prompt_text.contains(canonical),
                "prompt leaked {canonical:?}"
            );
        }
    }

    #[test]
    fn graphrag_and_kvi_share_retrieval_trace() {
        let f = fixture();
        let config = PipelineConfig::default();
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        let a = answer_query(&query, &f.stores(), &config, Condition::GraphRag).unwrap();
        let b = answer_query(&query, &f.stores(), &config, Condition::Kvi).unwrap();
        assert_eq!(a.trace.linked_entity, b.trace.linked_entity);
        assert_eq!(a.trace.relation_set, b.trace.relation_set);
        assert_eq!(a.trace.ranked, b.trace.ranked);
        assert_eq!(a.trace.prompt_evidence, b.trace.prompt_evidence);
        assert!(a.trace.injected.is_empty());
        assert!(!b.trace.injected.is_empty());
    }

    #[test]
    fn no_entity_kvi_equals_llm() {
        let f = fixture();
        let config = PipelineConfig::default();
        let query = Query::new("what is love?").unwrap();
        let llm = answer_query(&query, &f.stores(), &config, Condition::Llm).unwrap();
        let kvi = answer_query(&query, &f.stores(), &config, Condition::Kvi).unwrap();
        assert_eq!(
            serde_json::to_vec(&llm).unwrap(),
            serde_json::to_vec(&kvi).unwrap()
        );
    }

    #[test]
    fn kvprefix_prompt_is_query_only() {
        let f = fixture();
        let config = PipelineConfig::default();
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        let answer = answer_query(&query, &f.stores(), &config, Condition::KvPrefix).unwrap();
        assert!(answer.trace.prompt_evidence.is_empty());
        assert!(!answer.trace.injected.is_empty());
        assert!(answer.trace.injected.iter().all(|id| id.starts_with("sent:")));
        assert!(answer.trace.ranked.is_empty());
    }

    #[test]
    fn answers_are_deterministic() {
        let f = fixture();
        let config = PipelineConfig::default();
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        for condition in Condition::ALL {
            let a = answer_query(&query, &f.stores(), &config, condition).unwrap();
            let b = answer_query(&query, &f.stores(), &config, condition).unwrap();
            assert_eq!(
                serde_json::to_vec(&a).unwrap(),
                serde_json::to_vec(&b).unwrap(),
                "{condition}"
            );
        }
    }

    #[test]
    fn answer_text_is_kept_sentences_joined() {
        let f = fixture();
        let config = PipelineConfig {
            ground_thresh: 0.0,
            ..Default::default()
        };
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        for condition in Condition::ALL {
            let a = answer_query(&query, &f.stores(), &config, condition).unwrap();
            assert_eq!(a.text, a.kept_sentences.join(" "), "{condition}");
        }
    }

    #[test]
    fn partial_layer_mask_runs() {
        let f = fixture();
        let config = PipelineConfig {
            layer_mask: Some([0, 1].into_iter().collect()),
            ..Default::default()
        };
        let query = Query::new("What symptom does SFTSV infection cause?").unwrap();
        let answer = answer_query(&query, &f.stores(), &config, Condition::Kvi).unwrap();
        assert!(!answer.trace.injected.is_empty());
    }

    #[test]
    fn fresh_sentence_store_for_unlinked_graph() {
        // a graph whose nodes never appear in the query must fall back
        let f = fixture();
        let query = Query::new("Completely unrelated words here.").unwrap();
        let a = answer_query(&query, &f.stores(), &PipelineConfig::default(), Condition::GraphRag)
            .unwrap();
        assert!(a.trace.linked_entity.is_none());
        assert!(a.trace.ranked.is_empty());
    }

    #[test]
    fn unused_fixture_sentence_field() {
        // keep the Sentence import honest: provenance sentences round-trip
        let f = fixture();
        let sentences: Vec<Sentence> = f.provenance.sentences();
        assert_eq!(sentences.len(), 3);
    }
}
