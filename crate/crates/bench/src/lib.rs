//! Shared fixtures for the pipeline benchmarks: a compiled clinical
//! mini-corpus and a larger random graph for traversal measurements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use kvi_core::{
    build_graph, compile_bank, extract_corpus, Capsule, CapsuleSet, ExtractionRule,
    ExtractionRuleset, FrozenModel, IntentRule, IntentRuleset, KnowledgeGraph, KvBank,
    ModelConfig, ProvenanceIndex, QueryStores, Sentence,
};

pub struct Fixture {
    pub graph: KnowledgeGraph,
    pub provenance: ProvenanceIndex,
    pub capsules: CapsuleSet,
    pub bank: KvBank,
    pub model: FrozenModel,
    pub intent_rules: IntentRuleset,
}

impl Fixture {
    pub fn stores(&self) -> QueryStores<'_> {
        QueryStores {
            graph: &self.graph,
            provenance: &self.provenance,
            bank: &self.bank,
            model: &self.model,
            intent_rules: &self.intent_rules,
        }
    }
}

/// Five-sentence clinical corpus with anchors and triples compiled.
pub fn clinical_fixture() -> Fixture {
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
        ExtractionRule {
            phrases: vec!["is commonly treated with".into()],
            predicate: "treated_with".into(),
        },
    ])
    .unwrap();
    let docs = vec![
        (
            "sftsv".to_string(),
            "SFTSV infection frequently presents with fever. \
             SFTSV infection often presents with thrombocytopenia. \
             SFTSV infection ultimately causes multi-organ failure."
                .to_string(),
        ),
        (
            "care".to_string(),
            "fever is commonly treated with antipyretics. \
             thrombocytopenia is commonly treated with platelet transfusion."
                .to_string(),
        ),
    ];
    let (sentences, capsules) = extract_corpus(&docs, &ruleset).unwrap();
    let (graph, provenance) = build_graph(&capsules, &sentences).unwrap();
    let model = FrozenModel::init(ModelConfig::default()).unwrap();
    let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &model).unwrap();
    let intent_rules = IntentRuleset {
        rules: vec![IntentRule {
            pattern: ".*".into(),
            relations: vec![],
        }],
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

/// Random multigraph at the scale the traversal oracle targets: up to 50
/// nodes and exactly `edge_count` edges over five relations.
pub fn random_graph(edge_count: usize, seed: u64) -> (KnowledgeGraph, ProvenanceIndex) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(edge_count);
    let mut capsules = CapsuleSet::new();
    for i in 0..edge_count {
        let s = format!("n{:02}", rng.gen_range(0..50));
        let o = format!("n{:02}", rng.gen_range(0..50));
        let r = format!("r{}", rng.gen_range(0..5));
        let sentence = Sentence {
            sentence_id: format!("bench#s{i}"),
            text: format!("{s} {r} {o}."),
            doc_id: "bench".to_string(),
            block_id: "bench#b0".to_string(),
        };
        capsules.insert(Capsule::new(&s, &r, &o, &sentence)).unwrap();
        sentences.push(sentence);
    }
    build_graph(&capsules, &sentences).unwrap()
}
