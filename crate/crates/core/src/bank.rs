//! Compile-time key/value memory: canonical statements for entities and
//! triples are run through the frozen model once, and the resulting
//! per-layer tensors are stored for query-time prefix composition. The
//! bank holds continuous tensors plus minimal metadata — provenance stays
//! in the symbolic store and is never encoded here.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::capsule::{Capsule, CapsuleSet};
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::model::{fingerprint_to_hex, tokenize, FrozenModel, LayerKV};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Canonical sentence naming an entity; primes the subject without
    /// asserting a relation.
    Anchor,
    /// Canonical sentence verbalizing one capsule's relation.
    Triple,
    /// Query-time compiled raw sentence (the naive-injection baseline);
    /// never produced by bank compilation.
    Sentence,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::Anchor => 0,
            EntryKind::Triple => 1,
            EntryKind::Sentence => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(EntryKind::Anchor),
            1 => Ok(EntryKind::Triple),
            2 => Ok(EntryKind::Sentence),
            other => Err(Error::Format(format!("unknown entry kind {other}"))),
        }
    }
}

/// One precompiled cache entry: per-layer keys/values for a canonical
/// statement, encoded at base position 0.
#[derive(Debug, Clone)]
pub struct KvEntry {
    pub entry_id: String,
    pub kind: EntryKind,
    /// Entity name for anchors, capsule id for triples, sentence id for
    /// query-time sentence entries.
    pub source_ref: String,
    /// The compiled statement, kept for auditing only; stripped banks carry
    /// `None` and behave identically.
    pub canonical_text: Option<String>,
    pub layers: Vec<LayerKV>,
    pub token_len: usize,
}

/// Disk-backed store of compiled entries, bound to the exact weights that
/// produced them via the model fingerprint.
#[derive(Debug, Clone)]
pub struct KvBank {
    pub model_fingerprint: [u8; 32],
    entries: BTreeMap<String, KvEntry>,
    anchor_index: BTreeMap<String, String>,
    triple_index: BTreeMap<String, String>,
}

/// Renders a predicate label for canonical statements. Known labels use the
/// table; anything else falls back to underscores-become-spaces.
pub fn verbalize_predicate(predicate: &str) -> String {
    match predicate {
        "has_symptom" => "has symptom".to_string(),
        "causes" => "causes".to_string(),
        other => other.replace('_', " "),
    }
}

/// Canonical anchor statement: "<entity> is a <type_hint>." with a hint,
/// bare "<entity>." without.
pub fn anchor_text(entity: &str, type_hint: Option<&str>) -> String {
    match type_hint {
        Some(hint) => format!("{entity} is a {hint}."),
        None => format!("{entity}."),
    }
}

/// Canonical triple statement: "<subject> <verbalized predicate> <object>."
pub fn triple_text(capsule: &Capsule) -> String {
    format!(
        "{} {} {}.",
        capsule.subject,
        verbalize_predicate(&capsule.predicate),
        capsule.object
    )
}

fn compile_text(
    entry_id: String,
    kind: EntryKind,
    source_ref: String,
    text: String,
    model: &FrozenModel,
) -> Result<KvEntry> {
    let tokens = tokenize(&text);
    let out = model.forward(&tokens, None, 0)?;
    Ok(KvEntry {
        entry_id,
        kind,
        source_ref,
        canonical_text: Some(text),
        layers: out.cache,
        token_len: tokens.len(),
    })
}

pub fn compile_anchor(
    entity: &str,
    type_hint: Option<&str>,
    model: &FrozenModel,
) -> Result<KvEntry> {
    if entity.is_empty() {
        return Err(Error::InvalidInput("anchor entity must be non-empty".into()));
    }
    compile_text(
        format!("anchor:{entity}"),
        EntryKind::Anchor,
        entity.to_string(),
        anchor_text(entity, type_hint),
        model,
    )
}

pub fn compile_triple(capsule: &Capsule, model: &FrozenModel) -> Result<KvEntry> {
    if verbalize_predicate(&capsule.predicate).trim().is_empty() {
        return Err(Error::InvalidInput(format!(
            "capsule {}: predicate verbalizes to empty text",
            capsule.capsule_id
        )));
    }
    compile_text(
        format!("triple:{}", capsule.capsule_id),
        EntryKind::Triple,
        capsule.capsule_id.clone(),
        triple_text(capsule),
        model,
    )
}

/// Query-time compilation of a raw evidence sentence (the injection
/// baseline without graph alignment). Entries of this kind live only in
/// memory.
pub fn compile_sentence(
    sentence_id: &str,
    text: &str,
    model: &FrozenModel,
) -> Result<KvEntry> {
    compile_text(
        format!("sent:{sentence_id}"),
        EntryKind::Sentence,
        sentence_id.to_string(),
        text.to_string(),
        model,
    )
}

/// Compiles one anchor per graph entity and one triple entry per capsule.
/// Entries compile in parallel; the bank orders them by entry id, so output
/// is deterministic regardless of scheduling.
pub fn compile_bank(
    graph: &KnowledgeGraph,
    capsules: &CapsuleSet,
    type_hints: &BTreeMap<String, String>,
    model: &FrozenModel,
) -> Result<KvBank> {
    enum Job<'a> {
        Anchor(&'a str),
        Triple(&'a Capsule),
    }

    let mut jobs: Vec<Job> = graph.nodes().map(Job::Anchor).collect();
    jobs.extend(capsules.iter().map(Job::Triple));

    let compiled: Result<Vec<KvEntry>> = jobs
        .par_iter()
        .map(|job| match job {
            Job::Anchor(entity) => {
                compile_anchor(entity, type_hints.get(*entity).map(String::as_str), model)
                    .map_err(|e| Error::InvalidInput(format!("anchor {entity:?}: {e}")))
            }
            Job::Triple(capsule) => compile_triple(capsule, model)
                .map_err(|e| Error::InvalidInput(format!("capsule {}: {e}", capsule.capsule_id))),
        })
        .collect();

    let mut bank = KvBank::new(model.fingerprint());
    for entry in compiled? {
        bank.insert(entry)?;
    }
    Ok(bank)
}

impl KvBank {
    pub fn new(model_fingerprint: [u8; 32]) -> Self {
        KvBank {
            model_fingerprint,
            entries: BTreeMap::new(),
            anchor_index: BTreeMap::new(),
            triple_index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, entry: KvEntry) -> Result<()> {
        if self.entries.contains_key(&entry.entry_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate bank entry {}",
                entry.entry_id
            )));
        }
        match entry.kind {
            EntryKind::Anchor => {
                self.anchor_index
                    .insert(entry.source_ref.clone(), entry.entry_id.clone());
            }
            EntryKind::Triple => {
                self.triple_index
                    .insert(entry.source_ref.clone(), entry.entry_id.clone());
            }
            EntryKind::Sentence => {}
        }
        self.entries.insert(entry.entry_id.clone(), entry);
        Ok(())
    }

    pub fn get(&self, entry_id: &str) -> Option<&KvEntry> {
        self.entries.get(entry_id)
    }

    pub fn anchor_for(&self, entity: &str) -> Option<&KvEntry> {
        self.anchor_index.get(entity).and_then(|id| self.entries.get(id))
    }

    pub fn triple_for(&self, capsule_id: &str) -> Option<&KvEntry> {
        self.triple_index.get(capsule_id).and_then(|id| self.entries.get(id))
    }

    pub fn entries(&self) -> impl Iterator<Item = &KvEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_fingerprint(&self, model: &FrozenModel) -> Result<()> {
        let actual = model.fingerprint();
        if self.model_fingerprint != actual {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint_to_hex(&self.model_fingerprint),
                actual: fingerprint_to_hex(&actual),
            });
        }
        Ok(())
    }

    /// Writes the bank. Entries are serialized in id order; the optional
    /// trailing text section carries audit statements and can be omitted
    /// (`include_text = false`) with no effect on query-time behavior.
    pub fn save(&self, path: &Path, include_text: bool) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(b"KVIB")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_all(&self.model_fingerprint)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for entry in self.entries.values() {
            write_str16(&mut w, &entry.entry_id)?;
            w.write_u8(entry.kind.code())?;
            write_str16(&mut w, &entry.source_ref)?;
            w.write_u32::<LittleEndian>(entry.token_len as u32)?;
            for layer in &entry.layers {
                for v in layer.keys.iter() {
                    w.write_f32::<LittleEndian>(*v)?;
                }
                for v in layer.values.iter() {
                    w.write_f32::<LittleEndian>(*v)?;
                }
            }
        }
        if include_text {
            let with_text: Vec<(&String, &String)> = self
                .entries
                .iter()
                .filter_map(|(id, e)| e.canonical_text.as_ref().map(|t| (id, t)))
                .collect();
            w.write_all(b"TEXT")?;
            w.write_u32::<LittleEndian>(with_text.len() as u32)?;
            for (id, text) in with_text {
                write_str16(&mut w, id)?;
                let bytes = text.as_bytes();
                w.write_u32::<LittleEndian>(bytes.len() as u32)?;
                w.write_all(bytes)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a bank and binds it to `model`, failing immediately on a
    /// fingerprint mismatch — a bank is only meaningful against the exact
    /// weights that compiled it.
    pub fn load(path: &Path, model: &FrozenModel) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"KVIB" {
            return Err(Error::Format(format!(
                "bad bank magic {magic:?}, expected \"KVIB\""
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint)?;
        let mut bank = KvBank::new(fingerprint);
        bank.check_fingerprint(model)?;

        let cfg = model.config();
        let (layers, heads, dim) = (cfg.num_layers, cfg.num_heads, cfg.head_dim);
        let count = r.read_u32::<LittleEndian>()? as usize;
        for _ in 0..count {
            let entry_id = read_str16(&mut r)?;
            let kind = EntryKind::from_code(r.read_u8()?)?;
            let source_ref = read_str16(&mut r)?;
            let token_len = r.read_u32::<LittleEndian>()? as usize;
            let mut layer_kvs = Vec::with_capacity(layers);
            for _ in 0..layers {
                let keys = read_tensor(&mut r, heads, token_len, dim)?;
                let values = read_tensor(&mut r, heads, token_len, dim)?;
                layer_kvs.push(LayerKV {
                    keys,
                    values,
                    base_position: 0,
                });
            }
            bank.insert(KvEntry {
                entry_id,
                kind,
                source_ref,
                canonical_text: None,
                layers: layer_kvs,
                token_len,
            })?;
        }

        // optional audit-text section
        let mut marker = [0u8; 4];
        match r.read_exact(&mut marker) {
            Ok(()) => {
                if &marker != b"TEXT" {
                    return Err(Error::Format(format!(
                        "unexpected trailing section {marker:?}"
                    )));
                }
                let n = r.read_u32::<LittleEndian>()? as usize;
                for _ in 0..n {
                    let id = read_str16(&mut r)?;
                    let len = r.read_u32::<LittleEndian>()? as usize;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)?;
                    let text = String::from_utf8(buf)
                        .map_err(|_| Error::Format("audit text is not UTF-8".into()))?;
                    if let Some(entry) = bank.entries.get_mut(&id) {
                        entry.canonical_text = Some(text);
                    } else {
                        return Err(Error::Format(format!(
                            "audit text for unknown entry {id}"
                        )));
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {}
            Err(e) => return Err(e.into()),
        }
        Ok(bank)
    }
}

/// A composed external prefix: per-layer concatenation of entry tensors in
/// injection order, plus the bookkeeping traces need.
#[derive(Debug, Clone)]
pub struct PrefixKV {
    pub layers: Vec<LayerKV>,
    pub token_len: usize,
    pub entry_ids: Vec<String>,
    pub entry_lens: Vec<usize>,
}

impl PrefixKV {
    pub fn empty(model: &FrozenModel) -> Self {
        let cfg = model.config();
        PrefixKV {
            layers: (0..cfg.num_layers)
                .map(|_| LayerKV::empty(cfg.num_heads, cfg.head_dim))
                .collect(),
            token_len: 0,
            entry_ids: Vec::new(),
            entry_lens: Vec::new(),
        }
    }
}

/// Concatenates entries into a prefix. With `reposition`, entry i's keys
/// are rotated so its base position equals the running token offset, giving
/// the prefix one coherent position stream; without it, every entry keeps
/// its compile-time base (overlapping positions, kept for ablation).
pub fn compose_entries(
    entries: &[&KvEntry],
    reposition: bool,
    model: &FrozenModel,
) -> Result<PrefixKV> {
    let cfg = model.config();
    let total: usize = entries.iter().map(|e| e.token_len).sum();
    if total > cfg.max_positions {
        return Err(Error::PositionOverflow {
            needed: total,
            max: cfg.max_positions,
        });
    }

    let mut prefix = PrefixKV::empty(model);
    let mut offset = 0usize;
    for entry in entries {
        if entry.layers.len() != cfg.num_layers {
            return Err(Error::ShapeMismatch(format!(
                "entry {}: {} layers, model has {}",
                entry.entry_id,
                entry.layers.len(),
                cfg.num_layers
            )));
        }
        for (l, block) in entry.layers.iter().enumerate() {
            if block.seq_len() != entry.token_len {
                return Err(Error::ShapeMismatch(format!(
                    "entry {}: layer {l} holds {} slots, token_len is {}",
                    entry.entry_id,
                    block.seq_len(),
                    entry.token_len
                )));
            }
            let placed = if reposition {
                model.rotate_keys(block, offset)?
            } else {
                block.clone()
            };
            prefix.layers[l].append(&placed);
        }
        prefix.entry_ids.push(entry.entry_id.clone());
        prefix.entry_lens.push(entry.token_len);
        offset += entry.token_len;
    }
    prefix.token_len = total;
    Ok(prefix)
}

/// Builds the injection prefix for a query: the entity's anchor entry
/// first, then triple entries in ranked order.
pub fn compose_prefix(
    bank: &KvBank,
    anchor_entity: &str,
    ranked_capsule_ids: &[String],
    reposition: bool,
    model: &FrozenModel,
) -> Result<PrefixKV> {
    bank.check_fingerprint(model)?;
    let anchor = bank
        .anchor_for(anchor_entity)
        .ok_or_else(|| Error::MissingEntry {
            id: format!("anchor:{anchor_entity}"),
        })?;
    let mut parts = vec![anchor];
    for capsule_id in ranked_capsule_ids {
        parts.push(bank.triple_for(capsule_id).ok_or_else(|| Error::MissingEntry {
            id: format!("triple:{capsule_id}"),
        })?);
    }
    compose_entries(&parts, reposition, model)
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format(format!("string too long to serialize: {} bytes", bytes.len())));
    }
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_str16<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string field is not UTF-8".into()))
}

fn read_tensor<R: Read>(r: &mut R, heads: usize, seq: usize, dim: usize) -> Result<Array3<f32>> {
    let len = heads * seq * dim;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f32::<LittleEndian>()?);
    }
    Array3::from_shape_vec((heads, seq, dim), data)
        .map_err(|e| Error::Format(format!("tensor shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{extract_corpus, ExtractionRule, ExtractionRuleset, Sentence};
    use crate::graph::build_graph;
    use crate::model::{block_diagonal_mask, ModelConfig};
    use ndarray::s;

    fn model() -> FrozenModel {
        FrozenModel::init(ModelConfig::default()).unwrap()
    }

    fn sftsv() -> (Vec<Sentence>, CapsuleSet) {
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
        extract_corpus(&docs, &ruleset).unwrap()
    }

    fn max_delta(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn anchor_texts() {
        assert_eq!(
            anchor_text("SFTSV infection", Some("viral disease")),
            "SFTSV infection is a viral disease."
        );
        assert_eq!(anchor_text("fever", None), "fever.");
    }

    #[test]
    fn predicate_verbalization() {
        assert_eq!(verbalize_predicate("has_symptom"), "has symptom");
        assert_eq!(verbalize_predicate("causes"), "causes");
        assert_eq!(verbalize_predicate("interacts_with"), "interacts with");
    }

    #[test]
    fn compiled_anchor_matches_direct_forward() {
        let m = model();
        let entry = compile_anchor("SFTSV infection", Some("viral disease"), &m).unwrap();
        let text = "SFTSV infection is a viral disease.";
        assert_eq!(entry.canonical_text.as_deref(), Some(text));
        let direct = m.forward(&tokenize(text), None, 0).unwrap().cache;
        for (a, b) in entry.layers.iter().zip(&direct) {
            assert_eq!(a.keys, b.keys);
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn empty_anchor_entity_rejected() {
        assert!(compile_anchor("", None, &model()).is_err());
    }

    #[test]
    fn triple_entry_excludes_provenance() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let a = capsules.iter().next().unwrap().clone();
        // same statement, different evidence sentence
        let mut b = a.clone();
        b.provenance.sentence_id = sentences[1].sentence_id.clone();
        b.capsule_id = "other-id".into();

        let ea = compile_triple(&a, &m).unwrap();
        let eb = compile_triple(&b, &m).unwrap();
        assert_ne!(ea.entry_id, eb.entry_id);
        for (la, lb) in ea.layers.iter().zip(&eb.layers) {
            assert_eq!(la.keys, lb.keys);
            assert_eq!(la.values, lb.values);
        }
    }

    #[test]
    fn bank_over_mini_corpus() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let hints = BTreeMap::from([(
            "SFTSV infection".to_string(),
            "viral disease".to_string(),
        )]);
        let bank = compile_bank(&graph, &capsules, &hints, &m).unwrap();
        assert_eq!(bank.len(), 7); // 4 anchors + 3 triples
        assert!(bank.anchor_for("SFTSV infection").is_some());
        assert!(bank.anchor_for("fever").is_some());
        for c in capsules.iter() {
            assert!(bank.triple_for(&c.capsule_id).is_some());
        }
        let anchor = bank.anchor_for("SFTSV infection").unwrap();
        assert_eq!(
            anchor.canonical_text.as_deref(),
            Some("SFTSV infection is a viral disease.")
        );
    }

    #[test]
    fn empty_bank_is_valid() {
        let m = model();
        let (graph, _) = build_graph(&CapsuleSet::new(), &[]).unwrap();
        let bank = compile_bank(&graph, &CapsuleSet::new(), &BTreeMap::new(), &m).unwrap();
        assert!(bank.is_empty());
        assert_eq!(bank.model_fingerprint, m.fingerprint());
    }

    #[test]
    fn compose_length_additivity() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        let ids: Vec<String> = capsules.iter().map(|c| c.capsule_id.clone()).collect();
        let prefix = compose_prefix(&bank, "SFTSV infection", &ids, true, &m).unwrap();
        let expect: usize = prefix.entry_lens.iter().sum();
        assert_eq!(prefix.token_len, expect);
        assert_eq!(prefix.entry_ids.len(), 4); // anchor + 3 triples
        assert!(prefix.entry_ids[0].starts_with("anchor:"));
        for layer in &prefix.layers {
            assert_eq!(layer.seq_len(), prefix.token_len);
        }
    }

    #[test]
    fn compose_empty_ranked_list_is_anchor_alone() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        let prefix = compose_prefix(&bank, "fever", &[], true, &m).unwrap();
        let anchor = bank.anchor_for("fever").unwrap();
        assert_eq!(prefix.token_len, anchor.token_len);
        assert_eq!(prefix.entry_ids, vec![anchor.entry_id.clone()]);
    }

    #[test]
    fn compose_missing_entry_names_id() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        match compose_prefix(&bank, "SFTSV infection", &["nope".into()], true, &m) {
            Err(Error::MissingEntry { id }) => assert_eq!(id, "triple:nope"),
            other => panic!("expected missing entry, got {other:?}"),
        }
        assert!(matches!(
            compose_prefix(&bank, "unlisted", &[], true, &m),
            Err(Error::MissingEntry { .. })
        ));
    }

    #[test]
    fn compose_rejects_foreign_model() {
        let m = model();
        let other = FrozenModel::init(ModelConfig { seed: 99, ..Default::default() }).unwrap();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        assert!(matches!(
            compose_prefix(&bank, "fever", &[], true, &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn entry_independence_under_composition() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        let ids: Vec<String> = capsules.iter().map(|c| c.capsule_id.clone()).collect();

        for reposition in [false, true] {
            let solo = compose_prefix(&bank, "SFTSV infection", &ids[..1], reposition, &m).unwrap();
            let pair = compose_prefix(&bank, "SFTSV infection", &ids[..2], reposition, &m).unwrap();
            let x_span = solo.token_len;
            for (ls, lp) in solo.layers.iter().zip(&pair.layers) {
                let keys_sub = lp.keys.slice(s![.., ..x_span, ..]).to_owned();
                let values_sub = lp.values.slice(s![.., ..x_span, ..]).to_owned();
                // adding a co-injected entry never changes earlier slots
                assert_eq!(values_sub, ls.values);
                assert_eq!(keys_sub, ls.keys);
            }
        }
    }

    #[test]
    fn repositioned_composition_matches_masked_forward() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let hints = BTreeMap::from([(
            "SFTSV infection".to_string(),
            "viral disease".to_string(),
        )]);
        let bank = compile_bank(&graph, &capsules, &hints, &m).unwrap();
        let ids: Vec<String> = capsules.iter().map(|c| c.capsule_id.clone()).collect();
        let prefix = compose_prefix(&bank, "SFTSV infection", &ids, true, &m).unwrap();

        let mut concat_tokens = Vec::new();
        let mut lens = Vec::new();
        for id in &prefix.entry_ids {
            let text = bank.get(id).unwrap().canonical_text.as_ref().unwrap();
            let toks = tokenize(text);
            lens.push(toks.len());
            concat_tokens.extend(toks);
        }
        let mask = block_diagonal_mask(&lens);
        let oracle = m.forward_masked(&concat_tokens, &mask, 0).unwrap();
        for (composed, direct) in prefix.layers.iter().zip(&oracle.cache) {
            assert!(max_delta(&composed.keys, &direct.keys) <= 1e-5);
            assert!(max_delta(&composed.values, &direct.values) <= 1e-5);
        }
    }

    #[test]
    fn bank_roundtrip_is_byte_stable() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("bank1.bin");
        let p2 = dir.path().join("bank2.bin");
        bank.save(&p1, true).unwrap();
        let loaded = KvBank::load(&p1, &m).unwrap();
        assert_eq!(loaded.len(), bank.len());
        for entry in bank.entries() {
            let got = loaded.get(&entry.entry_id).unwrap();
            assert_eq!(got.canonical_text, entry.canonical_text);
            assert_eq!(got.token_len, entry.token_len);
            for (a, b) in got.layers.iter().zip(&entry.layers) {
                assert_eq!(a.keys, b.keys);
                assert_eq!(a.values, b.values);
            }
        }
        loaded.save(&p2, true).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn stripped_bank_behaves_identically() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.bin");
        let stripped = dir.path().join("stripped.bin");
        bank.save(&full, true).unwrap();
        bank.save(&stripped, false).unwrap();
        assert!(std::fs::metadata(&stripped).unwrap().len() < std::fs::metadata(&full).unwrap().len());

        let a = KvBank::load(&full, &m).unwrap();
        let b = KvBank::load(&stripped, &m).unwrap();
        let ids: Vec<String> = capsules.iter().map(|c| c.capsule_id.clone()).collect();
        let pa = compose_prefix(&a, "SFTSV infection", &ids, true, &m).unwrap();
        let pb = compose_prefix(&b, "SFTSV infection", &ids, true, &m).unwrap();
        for (la, lb) in pa.layers.iter().zip(&pb.layers) {
            assert_eq!(la.keys, lb.keys);
            assert_eq!(la.values, lb.values);
        }
        assert!(b.entries().all(|e| e.canonical_text.is_none()));
    }

    #[test]
    fn load_rejects_wrong_model() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let bank = compile_bank(&graph, &capsules, &BTreeMap::new(), &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        bank.save(&path, true).unwrap();
        let other = FrozenModel::init(ModelConfig { seed: 3, ..Default::default() }).unwrap();
        assert!(matches!(
            KvBank::load(&path, &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn recompilation_is_byte_identical() {
        let m = model();
        let (sentences, capsules) = sftsv();
        let (graph, _) = build_graph(&capsules, &sentences).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        compile_bank(&graph, &capsules, &BTreeMap::new(), &m)
            .unwrap()
            .save(&p1, true)
            .unwrap();
        compile_bank(&graph, &capsules, &BTreeMap::new(), &m)
            .unwrap()
            .save(&p2, true)
            .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
