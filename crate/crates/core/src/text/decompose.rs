//! Splits an overall interaction prompt into one prompt per person.
//!
//! Three cases are recognised:
//!
//! 1. no per-person markers: both persons get the overall text rewritten to
//!    the singular ("these two return" → "he returns");
//! 2. paired markers ("one person … the other", "the first … the second",
//!    "person one … person two") where the second marker opens a clause:
//!    the sentence is split at that clause;
//! 3. only the first person is described: person 1 keeps the sentence and
//!    person 2 gets a templated reciprocal description.
//!
//! Exact replies from an offline LLM cache take precedence over the rules.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    Rule,
    Cache,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::Rule => "rule",
            PromptSource::Cache => "cache",
        }
    }
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule" => Ok(PromptSource::Rule),
            "cache" => Ok(PromptSource::Cache),
            other => Err(Error::invalid(format!("unknown prompt source '{other}'"))),
        }
    }
}

/// Overall prompt with its per-person decomposition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptRecord {
    pub overall: String,
    pub person1: String,
    pub person2: String,
    pub source: PromptSource,
}

/// Which rule produced a decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecompositionCase {
    Shared,
    Split,
    FirstOnly,
}

/// Replayed LLM answers keyed by the exact overall prompt.
///
/// File format: `key TAB person1 TAB person2`, one UTF-8 record per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecompositionCache {
    entries: HashMap<String, (String, String)>,
}

impl DecompositionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, person1: impl Into<String>, person2: impl Into<String>) {
        self.entries.insert(key.into(), (person1.into(), person2.into()));
    }

    pub fn get(&self, key: &str) -> Option<(&str, &str)> {
        self.entries.get(key).map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cache = Self::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.strip_suffix('\n').unwrap_or(line);
            if !body.is_empty() {
                let fields: Vec<&str> = body.split('\t').collect();
                if fields.len() != 3 {
                    return Err(Error::format(
                        offset,
                        format!("cache record has {} fields, expected 3", fields.len()),
                    ));
                }
                cache.insert(fields[0], fields[1], fields[2]);
            }
            offset += line.len() as u64;
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        let text = String::from_utf8(raw)
            .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "cache is not UTF-8"))?;
        Self::parse(&text)
    }

    /// Serialises records sorted by key.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let (a, b) = &self.entries[k];
            out.push_str(&format!("{k}\t{a}\t{b}\n"));
        }
        out
    }
}

/// Marker pairs for the split case, in priority order.
const MARKER_PAIRS: &[(&str, &str)] = &[
    ("the first person", "the second person"),
    ("the first", "the second"),
    ("person one", "person two"),
    ("one person", "the other person"),
    ("one person", "the other"),
    ("one", "the other"),
];

/// Words that may precede a clause-opening second marker.
const CLAUSE_JOINERS: &[&str] = &["and", "while", "then", "whereas", "but", "as", "and then"];

/// Phrases that single out the first individual.
const INDIVIDUAL_MARKERS: &[&str] = &["the first", "one person", "person one", "a person", "someone"];

const PLURAL_SUBJECTS: &[&str] = &[
    "these two people",
    "these two persons",
    "these two",
    "the two people",
    "the two persons",
    "the two",
    "two people",
    "two persons",
    "both people",
    "both persons",
    "both of them",
    "the pair",
    "they",
    "both",
];

/// Decomposes `overall` into per-person prompts.
pub fn decompose_prompt(overall: &str, cache: Option<&DecompositionCache>) -> PromptRecord {
    if let Some((p1, p2)) = cache.and_then(|c| c.get(overall)) {
        if !p1.trim().is_empty() && !p2.trim().is_empty() {
            return PromptRecord {
                overall: overall.to_string(),
                person1: p1.to_string(),
                person2: p2.to_string(),
                source: PromptSource::Cache,
            };
        }
    }
    let (person1, person2, _) = decompose_by_rules(overall);
    PromptRecord { overall: overall.to_string(), person1, person2, source: PromptSource::Rule }
}

/// Applies the rule engine and reports which case fired.
pub fn decompose_by_rules(overall: &str) -> (String, String, DecompositionCase) {
    let text = strip_terminal(overall.trim());
    if text.is_empty() {
        return (String::new(), String::new(), DecompositionCase::Shared);
    }
    let lower = text.to_ascii_lowercase();
    if let Some(at) = find_split(&lower) {
        let head = trim_clause_tail(&text[..at]);
        let tail = strip_terminal(text[at..].trim());
        if !head.is_empty() && !tail.is_empty() {
            return (head.to_string(), tail.to_string(), DecompositionCase::Split);
        }
    }
    if INDIVIDUAL_MARKERS.iter().any(|m| contains_phrase(&lower, m)) {
        let poss = if contains_phrase(&lower, "she") || contains_phrase(&lower, "her") { "her" } else { "his" };
        let reply = format!("the second person responds to {poss} partner, facing the other person");
        return (text.to_string(), reply, DecompositionCase::FirstOnly);
    }
    let single = singularize(text);
    (single.clone(), single, DecompositionCase::Shared)
}

fn strip_terminal(s: &str) -> &str {
    s.trim_end_matches(|c: char| c == '.' || c == '!' || c == '?' || c.is_whitespace())
}

fn trim_clause_tail(s: &str) -> &str {
    let mut t = s.trim_end();
    loop {
        let before = t;
        t = t.trim_end_matches([',', ';']).trim_end();
        let lower = t.to_ascii_lowercase();
        for j in CLAUSE_JOINERS {
            if lower.ends_with(&format!(" {j}")) {
                t = t[..t.len() - j.len()].trim_end();
                break;
            }
        }
        if t == before {
            return t;
        }
    }
}

fn is_boundary(b: Option<u8>) -> bool {
    b.is_none_or(|c| !c.is_ascii_alphanumeric())
}

/// Whole-phrase match on word boundaries.
fn find_phrase(hay: &str, phrase: &str, from: usize) -> Option<usize> {
    let bytes = hay.as_bytes();
    let mut start = from;
    while let Some(rel) = hay.get(start..)?.find(phrase) {
        let at = start + rel;
        let end = at + phrase.len();
        let before = if at == 0 { None } else { Some(bytes[at - 1]) };
        if is_boundary(before) && is_boundary(bytes.get(end).copied()) {
            return Some(at);
        }
        start = at + 1;
    }
    None
}

fn contains_phrase(hay: &str, phrase: &str) -> bool {
    find_phrase(hay, phrase, 0).is_some()
}

/// Byte offset where the second person's clause starts, if any.
fn find_split(lower: &str) -> Option<usize> {
    for (first, second) in MARKER_PAIRS {
        let Some(a) = find_phrase(lower, first, 0) else { continue };
        let mut from = a + first.len();
        while let Some(b) = find_phrase(lower, second, from) {
            if opens_clause(&lower[..b]) {
                return Some(b);
            }
            from = b + 1;
        }
    }
    None
}

fn opens_clause(prefix: &str) -> bool {
    let p = prefix.trim_end();
    if p.ends_with(',') || p.ends_with(';') {
        return true;
    }
    CLAUSE_JOINERS.iter().any(|j| p.ends_with(&format!(" {j}")) || p.ends_with(&format!(",{j}")))
}

/// Rewrites a plural-subject sentence to the third-person singular.
pub fn singularize(text: &str) -> String {
    let lower = text.to_ascii_lowercase();
    let subject = PLURAL_SUBJECTS
        .iter()
        .find(|s| lower.starts_with(*s) && is_boundary(lower.as_bytes().get(s.len()).copied()));
    let words: Vec<String> = match subject {
        Some(subj) => {
            let mut tail: Vec<String> = text[subj.len()..].split_whitespace().map(str::to_string).collect();
            // Conjugate the first verb after optional -ly adverbs.
            if let Some(verb) = tail.iter_mut().find(|w| !w.to_ascii_lowercase().ends_with("ly")) {
                *verb = third_person(verb);
            }
            std::iter::once("he".to_string()).chain(tail).collect()
        }
        None => text.split_whitespace().map(str::to_string).collect(),
    };
    replace_words(&words.join(" "))
}

fn replace_words(s: &str) -> String {
    const PHRASES: &[(&str, &str)] = &[
        ("each other", "the other person"),
        ("one another", "the other person"),
        ("themselves", "himself"),
        ("their", "his"),
        ("them", "him"),
        ("they", "he"),
    ];
    let mut out = s.to_string();
    for (from, to) in PHRASES {
        let mut pos = 0;
        while let Some(at) = find_phrase(&out.to_ascii_lowercase(), from, pos) {
            out.replace_range(at..at + from.len(), to);
            pos = at + to.len();
        }
    }
    out
}

fn third_person(verb: &str) -> String {
    let lower = verb.to_ascii_lowercase();
    let irregular = match lower.as_str() {
        "are" => Some("is"),
        "have" => Some("has"),
        "were" => Some("was"),
        "do" => Some("does"),
        "go" => Some("goes"),
        _ => None,
    };
    if let Some(v) = irregular {
        return v.to_string();
    }
    let bytes = lower.as_bytes();
    if lower.ends_with("ss")
        || lower.ends_with("sh")
        || lower.ends_with("ch")
        || lower.ends_with('x')
        || lower.ends_with('z')
        || lower.ends_with('o')
    {
        return format!("{verb}es");
    }
    if lower.ends_with('s') {
        return verb.to_string();
    }
    if bytes.len() >= 2 && lower.ends_with('y') && !b"aeiou".contains(&bytes[bytes.len() - 2]) {
        return format!("{}ies", &verb[..verb.len() - 1]);
    }
    format!("{verb}s")
}
