use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Ordered suffix rewrites. The first rewrite whose result is a known lemma
/// (and at least `min_stem_len` characters long) wins.
pub const SUFFIX_RULES: &[(&str, &str)] = &[
    ("ies", "y"),
    ("ying", "ie"),
    ("bbing", "b"),
    ("dding", "d"),
    ("gging", "g"),
    ("mming", "m"),
    ("nning", "n"),
    ("pping", "p"),
    ("rring", "r"),
    ("tting", "t"),
    ("bbed", "b"),
    ("dded", "d"),
    ("gged", "g"),
    ("mmed", "m"),
    ("nned", "n"),
    ("pped", "p"),
    ("rred", "r"),
    ("tted", "t"),
    ("ing", "e"),
    ("ing", ""),
    ("ied", "y"),
    ("ed", "e"),
    ("ed", ""),
    ("s", ""),
    ("es", ""),
];

/// Rule-based English lemmatizer: an irregular-form table, then a known-lemma
/// check, then ordered suffix rules, then identity.
///
/// Irregular targets are resolved to fixed points and registered as known
/// lemmas at construction, which makes `lemmatize` idempotent.
#[derive(Debug, Clone)]
pub struct Lemmatizer {
    irregular: HashMap<String, String>,
    known: HashSet<String>,
    min_stem_len: usize,
}

impl Lemmatizer {
    pub fn new<I, S>(irregular: HashMap<String, String>, known: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut resolved = HashMap::with_capacity(irregular.len());
        for surface in irregular.keys() {
            let mut target = &irregular[surface];
            let mut hops = 0;
            while let Some(next) = irregular.get(target) {
                if next == target || hops > irregular.len() {
                    break;
                }
                target = next;
                hops += 1;
            }
            resolved.insert(surface.clone(), target.clone());
        }
        let mut known: HashSet<String> = known.into_iter().map(Into::into).collect();
        known.extend(resolved.values().cloned());
        Lemmatizer {
            irregular: resolved,
            known,
            min_stem_len: 2,
        }
    }

    /// Parses `surface<TAB>lemma` lines; `#` lines and blanks are ignored.
    pub fn parse_table(text: &str) -> Result<HashMap<String, String>> {
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(s), Some(l), None) if !s.is_empty() && !l.is_empty() => {
                    map.insert(s.to_lowercase(), l.to_lowercase());
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "irregular table line {}: expected `surface<TAB>lemma`",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(map)
    }

    pub fn add_known<I, S>(&mut self, lemmas: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.known.extend(lemmas.into_iter().map(Into::into));
    }

    pub fn is_known(&self, lemma: &str) -> bool {
        self.known.contains(lemma)
    }

    pub fn lemmatize(&self, word: &str) -> String {
        if word.is_empty() {
            return String::new();
        }
        if let Some(lemma) = self.irregular.get(word) {
            return lemma.clone();
        }
        if self.known.contains(word) {
            return word.to_string();
        }
        for (suffix, replacement) in SUFFIX_RULES {
            if let Some(stem) = word.strip_suffix(suffix) {
                if stem.chars().count() < self.min_stem_len {
                    continue;
                }
                let candidate = format!("{stem}{replacement}");
                if self.known.contains(&candidate) {
                    return self.irregular.get(&candidate).cloned().unwrap_or(candidate);
                }
            }
        }
        word.to_string()
    }
}
