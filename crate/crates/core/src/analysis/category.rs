use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use crate::error::{Error, Result};

use super::trace::RoutingTrace;

pub const OTHER: &str = "other";

const BUNDLED: &str = include_str!("../../data/token_categories.json");

#[derive(Deserialize)]
struct FileLexical {
    name: String,
    words: Vec<String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum PatternKind {
    Suffix,
    Capitalized,
    Number,
    Ordinal,
    Punctuation,
}

#[derive(Deserialize)]
struct FilePattern {
    name: String,
    kind: PatternKind,
    #[serde(default)]
    suffixes: Vec<String>,
    /// Also match the suffix followed by a plural `s`.
    #[serde(default)]
    plural: bool,
}

#[derive(Deserialize)]
struct CategoryFile {
    version: u32,
    lexical: Vec<FileLexical>,
    patterns: Vec<FilePattern>,
}

/// Word classifier: lexical lists (case-insensitive) in file order, then
/// morphological patterns in file order, else [`OTHER`].
pub struct Categories {
    names: Vec<String>,
    lexicon: HashMap<String, usize>,
    patterns: Vec<(usize, FilePattern)>,
}

impl Categories {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled category file is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CategoryFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("category file: {e}")))?;
        if file.version != 1 {
            return Err(Error::Format(format!("category file version {}, expected 1", file.version)));
        }
        let mut names = Vec::new();
        let mut lexicon = HashMap::new();
        for cat in file.lexical {
            let id = names.len();
            names.push(cat.name);
            for w in cat.words {
                // earlier categories win on duplicates
                lexicon.entry(w.to_lowercase()).or_insert(id);
            }
        }
        let mut patterns = Vec::new();
        for p in file.patterns {
            patterns.push((names.len(), p));
            names.push(patterns.last().unwrap().1.name.clone());
        }
        names.push(OTHER.into());
        Ok(Self { names, lexicon, patterns })
    }

    /// Category names in precedence order, ending with [`OTHER`].
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn categorize(&self, word: &str) -> &str {
        if let Some(&id) = self.lexicon.get(&word.to_lowercase()) {
            return &self.names[id];
        }
        for (id, p) in &self.patterns {
            if matches(p, word) {
                return &self.names[*id];
            }
        }
        OTHER
    }
}

fn matches(p: &FilePattern, word: &str) -> bool {
    let alpha = !word.is_empty() && word.chars().all(char::is_alphabetic);
    match p.kind {
        PatternKind::Suffix => {
            let lower = word.to_lowercase();
            alpha
                && p.suffixes.iter().any(|s| {
                    let hit = |w: &str| w.len() >= s.len() + 2 && w.ends_with(s.as_str());
                    hit(&lower) || (p.plural && lower.strip_suffix('s').is_some_and(hit))
                })
        }
        PatternKind::Capitalized => alpha && word.chars().next().is_some_and(char::is_uppercase),
        PatternKind::Number => {
            word.starts_with(|c: char| c.is_ascii_digit())
                && word.ends_with(|c: char| c.is_ascii_digit())
                && word.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '.')
        }
        PatternKind::Ordinal => {
            let digits = word.trim_end_matches(|c: char| c.is_ascii_alphabetic());
            let suffix = word[digits.len()..].to_lowercase();
            !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) && ["st", "nd", "rd", "th"].contains(&suffix.as_str())
        }
        PatternKind::Punctuation => !word.is_empty() && word.chars().all(|c| c.is_ascii_punctuation()),
    }
}

/// Splits bytes into units: maximal runs of alphanumeric bytes (non-ASCII
/// bytes count as letters), every other byte on its own. Returns the unit
/// ranges.
pub fn segment(bytes: &[u8]) -> Vec<std::ops::Range<usize>> {
    let wordish = |b: u8| b.is_ascii_alphanumeric() || b >= 0x80;
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        if wordish(bytes[i]) {
            while i < bytes.len() && wordish(bytes[i]) {
                i += 1;
            }
        } else {
            i += 1;
        }
        out.push(start..i);
    }
    out
}

/// For every trace record, the text unit its byte token belongs to. Units
/// are reconstructed per document from the recorded positions; ids above
/// 255 are rendered as `<id>`.
pub fn token_units(trace: &RoutingTrace) -> Vec<String> {
    let mut docs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in trace.records.iter().enumerate() {
        docs.entry(r.doc).or_default().push(i);
    }
    let mut out = vec![String::new(); trace.len()];
    for idx in docs.values_mut() {
        idx.sort_by_key(|&i| trace.records[i].pos);
        let mut start = 0;
        // split a document at gaps in position and at non-byte ids
        while start < idx.len() {
            let mut end = start + 1;
            while end < idx.len()
                && trace.records[idx[end]].pos == trace.records[idx[end - 1]].pos + 1
                && trace.records[idx[end]].token < 256
                && trace.records[idx[start]].token < 256
            {
                end += 1;
            }
            let run = &idx[start..end];
            if trace.records[run[0]].token >= 256 {
                out[run[0]] = format!("<{}>", trace.records[run[0]].token);
            } else {
                let bytes: Vec<u8> = run.iter().map(|&i| trace.records[i].token as u8).collect();
                for r in segment(&bytes) {
                    let text = String::from_utf8_lossy(&bytes[r.clone()]).into_owned();
                    for &i in &run[r] {
                        out[i] = text.clone();
                    }
                }
            }
            start = end;
        }
    }
    out
}
