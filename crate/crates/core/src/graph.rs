//! Knowledge graph built from the capsule set, plus the provenance indices
//! and relation-filtered multi-hop traversal.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleSet, Sentence};
use crate::error::{Error, Result};

/// One directed edge, carrying the id of the capsule that asserted it.
/// Parallel edges with distinct capsule ids are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    #[serde(rename = "s")]
    pub subject: String,
    #[serde(rename = "r")]
    pub predicate: String,
    #[serde(rename = "o")]
    pub object: String,
    pub capsule_id: String,
}

/// Entity/relation multigraph. Nodes are exact surface strings; lookups
/// case-fold but stored surfaces are never merged.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: BTreeSet<String>,
    edges: Vec<Edge>,
    outgoing: BTreeMap<String, Vec<usize>>,
    incoming: BTreeMap<String, Vec<usize>>,
    folded: BTreeMap<String, String>,
}

impl KnowledgeGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn contains_node(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    /// Case-folded node lookup, returning the stored surface form.
    pub fn resolve_node(&self, name: &str) -> Option<&str> {
        if let Some(exact) = self.nodes.get(name) {
            return Some(exact);
        }
        self.folded.get(&name.to_lowercase()).map(String::as_str)
    }

    /// All distinct predicate labels in the graph.
    pub fn relations(&self) -> BTreeSet<String> {
        self.edges.iter().map(|e| e.predicate.clone()).collect()
    }

    fn add_edge(&mut self, edge: Edge) {
        for node in [&edge.subject, &edge.object] {
            if self.nodes.insert(node.clone()) {
                self.folded.entry(node.to_lowercase()).or_insert_with(|| node.clone());
            }
        }
        let idx = self.edges.len();
        self.outgoing.entry(edge.subject.clone()).or_default().push(idx);
        self.incoming.entry(edge.object.clone()).or_default().push(idx);
        self.edges.push(edge);
    }
}

/// Sentence store plus the capsule-to-sentence join.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceIndex {
    pub sentence_index: BTreeMap<String, SentenceEntry>,
    pub triple_sentence_index: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEntry {
    pub text: String,
    pub doc_id: String,
    pub block_id: String,
    pub capsule_ids: Vec<String>,
}

impl ProvenanceIndex {
    /// Inverse of extraction: the evidence sentence a capsule came from.
    pub fn resolve_provenance(&self, capsule_id: &str) -> Result<Sentence> {
        let sentence_id =
            self.triple_sentence_index
                .get(capsule_id)
                .ok_or_else(|| Error::UnknownCapsuleId {
                    id: capsule_id.to_string(),
                })?;
        let entry = self
            .sentence_index
            .get(sentence_id)
            .ok_or_else(|| Error::DanglingProvenance {
                ids: vec![sentence_id.clone()],
            })?;
        Ok(Sentence {
            sentence_id: sentence_id.clone(),
            text: entry.text.clone(),
            doc_id: entry.doc_id.clone(),
            block_id: entry.block_id.clone(),
        })
    }

    pub fn sentences(&self) -> Vec<Sentence> {
        self.sentence_index
            .iter()
            .map(|(id, entry)| Sentence {
                sentence_id: id.clone(),
                text: entry.text.clone(),
                doc_id: entry.doc_id.clone(),
                block_id: entry.block_id.clone(),
            })
            .collect()
    }

    /// Both join directions must agree.
    fn check_consistency(&self) -> Result<()> {
        for (capsule_id, sentence_id) in &self.triple_sentence_index {
            let entry = self.sentence_index.get(sentence_id).ok_or_else(|| {
                Error::SchemaViolation {
                    path: format!("triple_sentence_index.{capsule_id}"),
                    message: format!("sentence {sentence_id} missing from sentence_index"),
                }
            })?;
            if !entry.capsule_ids.contains(capsule_id) {
                return Err(Error::SchemaViolation {
                    path: format!("sentence_index.{sentence_id}.capsule_ids"),
                    message: format!("missing back-reference to capsule {capsule_id}"),
                });
            }
        }
        for (sentence_id, entry) in &self.sentence_index {
            for capsule_id in &entry.capsule_ids {
                if self.triple_sentence_index.get(capsule_id) != Some(sentence_id) {
                    return Err(Error::SchemaViolation {
                        path: format!("sentence_index.{sentence_id}.capsule_ids"),
                        message: format!("capsule {capsule_id} does not join back"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    OutgoingOnly,
    Bidirectional,
}

/// Traversal bounds: hop limit, relation filter, edge direction.
#[derive(Debug, Clone)]
pub struct TraversalConfig {
    pub max_hops: usize,
    pub relation_set: BTreeSet<String>,
    pub direction: Direction,
}

impl TraversalConfig {
    pub fn new(max_hops: usize, relation_set: BTreeSet<String>, direction: Direction) -> Result<Self> {
        if max_hops == 0 {
            return Err(Error::Config("max_hops must be >= 1".into()));
        }
        Ok(TraversalConfig {
            max_hops,
            relation_set,
            direction,
        })
    }
}

/// One traversal hit: an edge's capsule plus the hop at which it was first
/// reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub capsule_id: String,
    pub hop: usize,
}

/// Builds the graph and provenance indices from capsules. Every capsule
/// contributes exactly one edge.
pub fn build_graph(
    capsules: &CapsuleSet,
    sentences: &[Sentence],
) -> Result<(KnowledgeGraph, ProvenanceIndex)> {
    let by_id: BTreeMap<&str, &Sentence> =
        sentences.iter().map(|s| (s.sentence_id.as_str(), s)).collect();

    let dangling: Vec<String> = capsules
        .iter()
        .filter(|c| !by_id.contains_key(c.provenance.sentence_id.as_str()))
        .map(|c| c.provenance.sentence_id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(Error::DanglingProvenance { ids: dangling });
    }

    let mut graph = KnowledgeGraph::default();
    let mut index = ProvenanceIndex::default();

    for sentence in sentences {
        index.sentence_index.insert(
            sentence.sentence_id.clone(),
            SentenceEntry {
                text: sentence.text.clone(),
                doc_id: sentence.doc_id.clone(),
                block_id: sentence.block_id.clone(),
                capsule_ids: Vec::new(),
            },
        );
    }

    for capsule in capsules.iter() {
        graph.add_edge(Edge {
            subject: capsule.subject.clone(),
            predicate: capsule.predicate.clone(),
            object: capsule.object.clone(),
            capsule_id: capsule.capsule_id.clone(),
        });
        index
            .triple_sentence_index
            .insert(capsule.capsule_id.clone(), capsule.provenance.sentence_id.clone());
        index
            .sentence_index
            .get_mut(&capsule.provenance.sentence_id)
            .expect("checked above")
            .capsule_ids
            .push(capsule.capsule_id.clone());
    }

    Ok((graph, index))
}

/// Relation-filtered breadth-first traversal. Nodes may be revisited across
/// hops, but each edge is reported once, at the first hop that reaches it.
/// Output order is (hop, capsule_id), so downstream top-k is reproducible.
pub fn traverse(
    graph: &KnowledgeGraph,
    start: &str,
    config: &TraversalConfig,
) -> Result<Vec<Candidate>> {
    let start = graph
        .resolve_node(start)
        .ok_or_else(|| Error::EntityNotFound {
            entity: start.to_string(),
        })?
        .to_string();

    let mut emitted: BTreeSet<&str> = BTreeSet::new();
    let mut results: Vec<Candidate> = Vec::new();
    let mut frontier: BTreeSet<String> = BTreeSet::new();
    frontier.insert(start);

    for hop in 1..=config.max_hops {
        let mut next_frontier: BTreeSet<String> = BTreeSet::new();
        let mut hop_hits: Vec<&Edge> = Vec::new();
        for node in &frontier {
            let mut candidate_edges: Vec<usize> = Vec::new();
            if let Some(out) = graph.outgoing.get(node) {
                candidate_edges.extend(out);
            }
            if config.direction == Direction::Bidirectional {
                if let Some(inc) = graph.incoming.get(node) {
                    candidate_edges.extend(inc);
                }
            }
            for idx in candidate_edges {
                let edge = &graph.edges[idx];
                if !config.relation_set.contains(&edge.predicate) {
                    continue;
                }
                let neighbor = if edge.subject == *node {
                    &edge.object
                } else {
                    &edge.subject
                };
                next_frontier.insert(neighbor.clone());
                if emitted.insert(&edge.capsule_id) {
                    hop_hits.push(edge);
                }
            }
        }
        hop_hits.sort_by(|a, b| a.capsule_id.cmp(&b.capsule_id));
        results.extend(hop_hits.into_iter().map(|e| Candidate {
            capsule_id: e.capsule_id.clone(),
            hop,
        }));
        frontier = next_frontier;
        if frontier.is_empty() {
            break;
        }
    }
    Ok(results)
}

/// On-disk form of the graph plus indices, with sorted keys for byte-stable
/// output.
#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<String>,
    edges: Vec<Edge>,
    sentence_index: BTreeMap<String, SentenceEntry>,
    triple_sentence_index: BTreeMap<String, String>,
}

pub fn save_graph(graph: &KnowledgeGraph, index: &ProvenanceIndex, path: &Path) -> Result<()> {
    let file = GraphFile {
        nodes: graph.nodes.iter().cloned().collect(),
        edges: graph.edges.clone(),
        sentence_index: index.sentence_index.clone(),
        triple_sentence_index: index.triple_sentence_index.clone(),
    };
    let out = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(out);
    serde_json::to_writer_pretty(&mut writer, &file)?;
    use std::io::Write;
    writeln!(writer)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<(KnowledgeGraph, ProvenanceIndex)> {
    let file = std::fs::File::open(path)?;
    let raw: GraphFile = serde_json::from_reader(std::io::BufReader::new(file))?;

    let nodes: BTreeSet<String> = raw.nodes.iter().cloned().collect();
    for (i, edge) in raw.edges.iter().enumerate() {
        for (field, endpoint) in [("s", &edge.subject), ("o", &edge.object)] {
            if !nodes.contains(endpoint) {
                return Err(Error::SchemaViolation {
                    path: format!("edges[{i}].{field}"),
                    message: format!("endpoint {endpoint:?} not in nodes"),
                });
            }
        }
        if !raw.triple_sentence_index.contains_key(&edge.capsule_id) {
            return Err(Error::SchemaViolation {
                path: format!("edges[{i}].capsule_id"),
                message: format!("capsule {} has no provenance entry", edge.capsule_id),
            });
        }
    }

    let mut graph = KnowledgeGraph::default();
    for node in &raw.nodes {
        if graph.nodes.insert(node.clone()) {
            graph.folded.entry(node.to_lowercase()).or_insert_with(|| node.clone());
        }
    }
    for edge in raw.edges {
        graph.add_edge(edge);
    }

    let index = ProvenanceIndex {
        sentence_index: raw.sentence_index,
        triple_sentence_index: raw.triple_sentence_index,
    };
    index.check_consistency()?;
    Ok((graph, index))
}
