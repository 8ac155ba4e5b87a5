//! Query-time evidence selection: entity linking, intent-to-relation
//! mapping, relevance scoring of traversal candidates, top-k ranking, and
//! the flat dense-retrieval baseline.

use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::capsule::Sentence;
use crate::error::{Error, Result};
use crate::graph::{Candidate, KnowledgeGraph, ProvenanceIndex};

/// A user question, optionally tagged with a dataset answer mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub text: String,
    pub dataset_hint: Option<String>,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::InvalidInput("query text must be non-empty".into()));
        }
        Ok(Query {
            text,
            dataset_hint: None,
        })
    }
}

/// A traversal candidate with its relevance score and the evidence sentence
/// that backs it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriple {
    pub capsule_id: String,
    pub score: f64,
    pub evidence_sentence_id: String,
    pub hop: usize,
}

/// Finds the graph entity mentioned in the query: the longest
/// case-insensitive exact occurrence of any node surface, ties broken by
/// earliest start, then lexicographic node name. `None` means the caller
/// falls back to plain generation — absence is a value, not an error.
pub fn link_entity(query_text: &str, graph: &KnowledgeGraph) -> Option<String> {
    let folded_query = query_text.to_lowercase();
    let mut best: Option<(usize, usize, &str)> = None; // (len, start, node)
    for node in graph.nodes() {
        let folded_node = node.to_lowercase();
        if folded_node.is_empty() {
            continue;
        }
        if let Some(start) = folded_query.find(&folded_node) {
            let len = folded_node.len();
            let better = match best {
                None => true,
                Some((blen, bstart, bnode)) => {
                    (len, std::cmp::Reverse(start), std::cmp::Reverse(node))
                        > (blen, std::cmp::Reverse(bstart), std::cmp::Reverse(bnode))
                }
            };
            if better {
                best = Some((len, start, node));
            }
        }
    }
    best.map(|(_, _, node)| node.to_string())
}

/// One intent rule: a pattern (regex, or literal keyword if the regex does
/// not compile) mapping to the relation labels it licenses. An empty
/// relation list means "all relations".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntentRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub relations: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntentRuleset {
    pub rules: Vec<IntentRule>,
}

impl IntentRuleset {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ruleset: IntentRuleset = serde_json::from_reader(std::io::BufReader::new(file))?;
        Ok(ruleset)
    }
}

/// Maps a query to the relation set licensed by the first matching rule;
/// queries matching nothing get every graph relation, so retrieval is
/// total.
pub fn classify_intent(
    query_text: &str,
    rules: &IntentRuleset,
    all_relations: &BTreeSet<String>,
) -> BTreeSet<String> {
    for rule in &rules.rules {
        let matched = match RegexBuilder::new(&rule.pattern)
            .case_insensitive(true)
            .build()
        {
            Ok(re) => re.is_match(query_text),
            Err(_) => query_text
                .to_lowercase()
                .contains(&rule.pattern.to_lowercase()),
        };
        if matched {
            if rule.relations.is_empty() {
                return all_relations.clone();
            }
            return rule.relations.iter().cloned().collect();
        }
    }
    all_relations.clone()
}

/// Words carrying no content signal; excluded from overlap measures.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "by", "did", "do", "does", "for", "from",
    "had", "has", "have", "how", "in", "is", "it", "its", "not", "of", "on", "or", "that", "the",
    "this", "to", "was", "were", "what", "when", "where", "which", "who", "why", "with",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Case-folded alphanumeric tokens with stopwords removed.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !is_stopword(t))
        .map(str::to_string)
        .collect()
}

fn fold_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub const HASH_DIM: usize = 256;

/// Signed feature-hashed bag of words: every case-folded token adds ±1 to
/// the bucket selected by its hash. Deterministic with no external
/// vocabulary.
pub fn hashed_embedding(text: &str) -> [f64; HASH_DIM] {
    let mut v = [0.0f64; HASH_DIM];
    for token in fold_tokens(text) {
        let h = fnv1a64(token.as_bytes());
        let bucket = (h % HASH_DIM as u64) as usize;
        let sign = if (h >> 8) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    v
}

/// Cosine with degenerate-input conventions: two zero vectors count as
/// aligned (1.0), exactly one zero vector as orthogonal (0.0), so identical
/// texts always score 1 after the affine map.
fn cosine(a: &[f64; HASH_DIM], b: &[f64; HASH_DIM]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            dot / (na * nb)
        }
    }
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Query–evidence relevance in [0, 1]: an even blend of content-token
/// Jaccard overlap and hashed bag-of-words cosine (mapped from [-1, 1] to
/// [0, 1]). Identical texts score 1; fully disjoint texts land near 0.25.
pub fn drm_score(query_text: &str, evidence_text: &str) -> f64 {
    let j = jaccard(&content_tokens(query_text), &content_tokens(evidence_text));
    let c = cosine(&hashed_embedding(query_text), &hashed_embedding(evidence_text));
    0.5 * j + 0.5 * ((c + 1.0) / 2.0)
}

/// Scores traversal candidates against the query via each capsule's
/// evidence sentence.
pub fn score_candidates(
    query_text: &str,
    candidates: &[Candidate],
    provenance: &ProvenanceIndex,
) -> Result<Vec<ScoredTriple>> {
    candidates
        .iter()
        .map(|c| {
            let sentence = provenance.resolve_provenance(&c.capsule_id)?;
            Ok(ScoredTriple {
                capsule_id: c.capsule_id.clone(),
                score: drm_score(query_text, &sentence.text),
                evidence_sentence_id: sentence.sentence_id,
                hop: c.hop,
            })
        })
        .collect()
}

/// Ranks by score descending, ties by (hop ascending, capsule_id); the
/// ordering is total, so any input permutation yields the same output.
pub fn select_topk(mut scored: Vec<ScoredTriple>, k: usize) -> Vec<ScoredTriple> {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.hop.cmp(&b.hop))
            .then(a.capsule_id.cmp(&b.capsule_id))
    });
    scored.truncate(k);
    scored
}

/// Flat nearest-neighbor baseline: top-k sentences by hashed-embedding
/// cosine against the query, ties by sentence id.
pub fn dense_retrieve(query_text: &str, sentences: &[Sentence], k: usize) -> Vec<Sentence> {
    let qv = hashed_embedding(query_text);
    let mut ranked: Vec<(f64, &Sentence)> = sentences
        .iter()
        .map(|s| (cosine(&qv, &hashed_embedding(&s.text)), s))
        .collect();
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.sentence_id.cmp(&b.1.sentence_id))
    });
    ranked.truncate(k);
    ranked.into_iter().map(|(_, s)| s.clone()).collect()
}
