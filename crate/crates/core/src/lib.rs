//! Core library for the knowledge-capsule KV-injection pipeline.
//!
//! The flow is: documents are segmented into sentences and mined into
//! subject/predicate/object capsules (`capsule`), capsules become a
//! relation multigraph with provenance indices (`graph`), and canonical
//! verbalizations of anchors and triples are precompiled into per-layer
//! attention key/value tensors (`bank`) against a frozen reference decoder
//! (`model`). At query time, retrieval ranks graph candidates (`retrieval`)
//! and the selected entries are spliced in front of the prompt's attention
//! state (`inject`). `eval` runs the condition grid and `stats` does the
//! interval/permutation arithmetic for the result tables.

pub mod bank;
pub mod capsule;
pub mod error;
pub mod eval;
pub mod graph;
pub mod inject;
pub mod model;
pub mod retrieval;
pub mod stats;

pub use bank::{
    compile_anchor, compile_bank, compile_sentence, compile_triple, compose_entries,
    compose_prefix, EntryKind, KvBank, KvEntry, PrefixKV,
};
pub use capsule::{
    extract_corpus, extract_triples, load_capsules, load_sentences, save_capsules, save_sentences,
    segment_sentences, Capsule, CapsuleSet, ExtractionRule, ExtractionRuleset, Provenance, Sentence,
};
pub use error::{Error, Result};
pub use eval::{
    canonicalize, exact_match, generate_relation_questions, load_dataset, run_grid, save_dataset,
    summarize, write_records, write_stats, write_table, AnswerMode, ConditionSummary, EvalRecord,
    GoldTrace, GridResult, QAExample,
};
pub use graph::{
    build_graph, load_graph, save_graph, traverse, Candidate, Direction, Edge, KnowledgeGraph,
    ProvenanceIndex, SentenceEntry, TraversalConfig,
};
pub use model::{
    block_diagonal_mask, detokenize, tokenize, ForwardOutput, FrozenModel, GenerateOutput,
    LayerKV, ModelConfig, EOT_TOKEN,
};
pub use inject::{
    answer_query, build_prompt, grounding_filter, inject_and_generate, Answer, Condition,
    InjectionOutcome, InjectionPlan, PipelineConfig, QueryStores, RankedTriple, Trace,
};
pub use retrieval::{
    classify_intent, dense_retrieve, drm_score, link_entity, score_candidates, select_topk,
    IntentRule, IntentRuleset, Query, ScoredTriple,
};
pub use stats::{bootstrap_ci, permutation_test};
