//! Symbolic capsule memory: sentence segmentation, deterministic triple
//! extraction, and capsule serialization.
//!
//! This is the plain-text half of the two-level memory. Nothing in this
//! module touches the model; capsule text is never fed to it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One evidence sentence from the source corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: String,
    pub text: String,
    pub doc_id: String,
    pub block_id: String,
}

/// Where a capsule came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sentence_id: String,
    pub doc_id: String,
}

/// A (subject, predicate, object) assertion with evidence provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capsule {
    #[serde(rename = "id")]
    pub capsule_id: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub provenance: Provenance,
}

impl Capsule {
    /// Content-addressed id over (subject, predicate, object, sentence_id).
    /// Two assertions of the same triple from different sentences get
    /// distinct ids.
    pub fn derive_id(subject: &str, predicate: &str, object: &str, sentence_id: &str) -> String {
        let mut hasher = Sha256::new();
        for part in [subject, predicate, object, sentence_id] {
            hasher.update(part.as_bytes());
            hasher.update([0x1f]);
        }
        let digest = hasher.finalize();
        let mut id = String::with_capacity(16);
        for byte in &digest[..8] {
            id.push_str(&format!("{byte:02x}"));
        }
        id
    }

    pub fn new(subject: &str, predicate: &str, object: &str, sentence: &Sentence) -> Self {
        Capsule {
            capsule_id: Self::derive_id(subject, predicate, object, &sentence.sentence_id),
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
            provenance: Provenance {
                sentence_id: sentence.sentence_id.clone(),
                doc_id: sentence.doc_id.clone(),
            },
        }
    }
}

/// An ordered collection of capsules with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CapsuleSet {
    capsules: Vec<Capsule>,
    by_id: BTreeMap<String, usize>,
}

impl CapsuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set, rejecting duplicate capsule ids.
    pub fn from_capsules(capsules: Vec<Capsule>) -> Result<Self> {
        let mut set = CapsuleSet::new();
        for capsule in capsules {
            set.insert(capsule)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, capsule: Capsule) -> Result<()> {
        if self.by_id.contains_key(&capsule.capsule_id) {
            return Err(Error::DuplicateCapsuleId {
                id: capsule.capsule_id,
            });
        }
        self.by_id.insert(capsule.capsule_id.clone(), self.capsules.len());
        self.capsules.push(capsule);
        Ok(())
    }

    pub fn get(&self, capsule_id: &str) -> Option<&Capsule> {
        self.by_id.get(capsule_id).map(|&i| &self.capsules[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Capsule> {
        self.capsules.iter()
    }

    pub fn len(&self) -> usize {
        self.capsules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capsules.is_empty()
    }
}

/// Abbreviations whose trailing period does not end a sentence.
/// Single capital letters are deliberately absent: "A. B." is two sentences.
const ABBREVIATIONS: &[&str] = &[
    "e.g", "i.e", "etc", "cf", "vs", "fig", "al", "dr", "mr", "mrs", "ms", "no", "approx",
];

/// Splits a document into sentences on `.`, `!`, `?` followed by whitespace
/// or end of input, skipping a small abbreviation stoplist.
///
/// Sentence ids are `<doc_id>#s<index>`, zero-based. The block id is a
/// pass-through `<doc_id>#b0`; no section structure is interpreted.
pub fn segment_sentences(document_text: &str, doc_id: &str) -> Vec<Sentence> {
    let block_id = format!("{doc_id}#b0");
    let chars: Vec<char> = document_text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;

    let push_sentence = |slice: &[char], sentences: &mut Vec<Sentence>| {
        let text: String = slice.iter().collect();
        let text = text.trim();
        if !text.is_empty() {
            let index = sentences.len();
            sentences.push(Sentence {
                sentence_id: format!("{doc_id}#s{index}"),
                text: text.to_string(),
                doc_id: doc_id.to_string(),
                block_id: block_id.clone(),
            });
        }
    };

    for i in 0..chars.len() {
        let c = chars[i];
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let at_end = i + 1 == chars.len();
        let followed_by_space = !at_end && chars[i + 1].is_whitespace();
        if !(at_end || followed_by_space) {
            continue;
        }
        if c == '.' && is_abbreviation(&chars[start..i]) {
            continue;
        }
        push_sentence(&chars[start..=i], &mut sentences);
        start = i + 1;
    }
    if start < chars.len() {
        push_sentence(&chars[start..], &mut sentences);
    }
    sentences
}

/// True when the word immediately before a period is on the stoplist.
fn is_abbreviation(before: &[char]) -> bool {
    let word: String = before
        .iter()
        .rev()
        .take_while(|c| !c.is_whitespace())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let word = word.trim_matches(|c: char| c == '(' || c == '"' || c == '\'');
    ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

/// One extraction pattern: any of `phrases` found mid-sentence splits it into
/// `<subject> <phrase> <object>` and labels the triple with `predicate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionRule {
    pub phrases: Vec<String>,
    pub predicate: String,
}

/// Ordered list of extraction rules. Order is significant: capsules are
/// emitted in rule order, then phrase order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionRuleset {
    pub rules: Vec<ExtractionRule>,
}

impl ExtractionRuleset {
    pub fn new(rules: Vec<ExtractionRule>) -> Result<Self> {
        let ruleset = ExtractionRuleset { rules };
        ruleset.validate()?;
        Ok(ruleset)
    }

    /// Rejects malformed patterns before any extraction runs.
    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::Config("extraction ruleset has no rules".into()));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.predicate.trim().is_empty() {
                return Err(Error::Config(format!("rule {i} has an empty predicate label")));
            }
            if rule.phrases.is_empty() {
                return Err(Error::Config(format!("rule {i} ({}) has no phrases", rule.predicate)));
            }
            for phrase in &rule.phrases {
                if phrase.trim().is_empty() {
                    return Err(Error::Config(format!(
                        "rule {i} ({}) has an empty phrase",
                        rule.predicate
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let rules: Vec<ExtractionRule> = serde_json::from_reader(std::io::BufReader::new(file))?;
        ExtractionRuleset::new(rules)
    }
}

/// Deterministic pattern extraction: for each rule, the first word-bounded,
/// case-insensitive occurrence of one of its phrases splits the sentence into
/// subject and object. Same input always yields the same capsules in the
/// same order.
pub fn extract_triples(sentence: &Sentence, ruleset: &ExtractionRuleset) -> Result<Vec<Capsule>> {
    ruleset.validate()?;
    let mut capsules = Vec::new();
    for rule in &ruleset.rules {
        let mut best: Option<(usize, usize)> = None;
        for phrase in &rule.phrases {
            if let Some((start, len)) = find_phrase(&sentence.text, phrase) {
                let better = match best {
                    None => true,
                    Some((bs, _)) => start < bs,
                };
                if better {
                    best = Some((start, len));
                }
            }
        }
        let Some((start, len)) = best else { continue };
        let subject = clean_argument(&sentence.text[..start]);
        let object = clean_argument(&sentence.text[start + len..]);
        if subject.is_empty() || object.is_empty() {
            continue;
        }
        capsules.push(Capsule::new(&subject, &rule.predicate, &object, sentence));
    }
    Ok(capsules)
}

/// Case-insensitive, word-bounded substring search. Returns byte offset and
/// length in the original text.
fn find_phrase(text: &str, phrase: &str) -> Option<(usize, usize)> {
    let haystack = text.to_lowercase();
    let needle = phrase.trim().to_lowercase();
    if needle.is_empty() || haystack.len() != text.len() {
        // Lowercasing that changes byte length would break offsets; corpus
        // text for this pipeline is expected to keep 1:1 folding.
        return fallback_find(text, &needle);
    }
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(&needle) {
        let start = from + rel;
        let end = start + needle.len();
        let left_ok = start == 0
            || !haystack[..start]
                .chars()
                .next_back()
                .is_some_and(char::is_alphanumeric);
        let right_ok = end == haystack.len()
            || !haystack[end..].chars().next().is_some_and(char::is_alphanumeric);
        if left_ok && right_ok {
            return Some((start, needle.len()));
        }
        from = start + 1;
    }
    None
}

fn fallback_find(text: &str, needle: &str) -> Option<(usize, usize)> {
    text.find(needle).map(|start| (start, needle.len()))
}

/// Trims whitespace, terminal punctuation, and a leading article from an
/// extracted argument.
fn clean_argument(raw: &str) -> String {
    let trimmed = raw
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim();
    let lower = trimmed.to_lowercase();
    for article in ["the ", "a ", "an "] {
        if lower.starts_with(article) {
            return trimmed[article.len()..].trim().to_string();
        }
    }
    trimmed.to_string()
}

/// Runs segmentation and extraction over whole documents, in (doc, sentence,
/// rule) order. Returns the sentences alongside the capsules.
pub fn extract_corpus(
    documents: &[(String, String)],
    ruleset: &ExtractionRuleset,
) -> Result<(Vec<Sentence>, CapsuleSet)> {
    ruleset.validate()?;
    let mut sentences = Vec::new();
    let mut capsules = CapsuleSet::new();
    for (doc_id, text) in documents {
        for sentence in segment_sentences(text, doc_id) {
            for capsule in extract_triples(&sentence, ruleset)? {
                // Content addressing: the same assertion extracted twice from
                // the same sentence collapses to one capsule.
                if capsules.get(&capsule.capsule_id).is_none() {
                    capsules.insert(capsule)?;
                }
            }
            sentences.push(sentence);
        }
    }
    Ok((sentences, capsules))
}

pub fn save_capsules(capsules: &CapsuleSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &capsules.capsules)?;
    use std::io::Write;
    writeln!(writer)?;
    Ok(())
}

/// Loads capsules and validates ids against `sentences`. Duplicated ids and
/// dangling provenance are both rejected.
pub fn load_capsules(path: &Path, sentences: &[Sentence]) -> Result<CapsuleSet> {
    let file = std::fs::File::open(path)?;
    let raw: Vec<Capsule> = serde_json::from_reader(std::io::BufReader::new(file))?;
    let set = CapsuleSet::from_capsules(raw)?;
    let known: std::collections::BTreeSet<&str> =
        sentences.iter().map(|s| s.sentence_id.as_str()).collect();
    let dangling: Vec<String> = set
        .iter()
        .filter(|c| !known.contains(c.provenance.sentence_id.as_str()))
        .map(|c| c.provenance.sentence_id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(Error::DanglingProvenance { ids: dangling });
    }
    Ok(set)
}

pub fn save_sentences(sentences: &[Sentence], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, sentences)?;
    use std::io::Write;
    writeln!(writer)?;
    Ok(())
}

pub fn load_sentences(path: &Path) -> Result<Vec<Sentence>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
