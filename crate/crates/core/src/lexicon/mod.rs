//! Lemmatization and lexical similarity.
//!
//! [`Lexicon::english`] bundles the shipped tables: ~180 irregular verbs, a
//! list of known verb lemmas, a handful of irregular noun plurals and a small
//! noun synset graph covering people, animals, everyday objects and scenes.

mod lemmatizer;
mod synset;

use std::collections::HashSet;
use std::path::Path;

pub use lemmatizer::{Lemmatizer, SUFFIX_RULES};
use serde::{Deserialize, Serialize};
pub use synset::SynsetGraph;

use crate::error::{Error, Result};

pub const IRREGULAR_VERBS: &str = include_str!("../../data/irregular_verbs.tsv");
pub const IRREGULAR_NOUNS: &str = include_str!("../../data/irregular_nouns.tsv");
pub const KNOWN_VERBS: &str = include_str!("../../data/verbs.txt");
pub const SYNSETS: &str = include_str!("../../data/synsets.tsv");
/// Activity verbs with their inflections: `lemma, 3sg, past, gerund`.
pub const VERB_FORMS: &str = include_str!("../../data/verb_forms.tsv");

#[derive(Debug, Clone)]
pub struct Lexicon {
    lemmatizer: Lemmatizer,
    graph: SynsetGraph,
    verbs: HashSet<String>,
}

/// Outcome of matching a caption subject against detector labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMatch {
    pub index: usize,
    pub similarity: f64,
    /// No label had positive similarity; the pick fell back to detector score.
    pub fallback: bool,
}

impl Lexicon {
    pub fn new(lemmatizer: Lemmatizer, graph: SynsetGraph, verbs: HashSet<String>) -> Self {
        Lexicon {
            lemmatizer,
            graph,
            verbs,
        }
    }

    /// The shipped English tables.
    pub fn english() -> Self {
        Self::from_tables(SYNSETS, IRREGULAR_VERBS).expect("shipped lexicon tables are valid")
    }

    /// Builds a lexicon from a synset graph and an irregular-verb table; the
    /// shipped verb list and noun plurals are always included.
    pub fn from_tables(synsets: &str, irregular_verbs: &str) -> Result<Self> {
        let graph = SynsetGraph::parse(synsets)?;
        let mut irregular = Lemmatizer::parse_table(irregular_verbs)?;
        irregular.extend(Lemmatizer::parse_table(IRREGULAR_NOUNS)?);
        let mut verbs = parse_word_list(KNOWN_VERBS);
        verbs.extend(
            irregular_verbs
                .lines()
                .filter(|l| !l.starts_with('#'))
                .filter_map(|l| l.split('\t').nth(1))
                .map(|l| l.trim().to_lowercase()),
        );
        let known: Vec<String> = verbs.iter().cloned().chain(graph.lemmas().map(String::from)).collect();
        let lemmatizer = Lemmatizer::new(irregular, known);
        Ok(Lexicon::new(lemmatizer, graph, verbs))
    }

    pub fn load(synsets: impl AsRef<Path>, irregular_verbs: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_tables(&read(synsets.as_ref())?, &read(irregular_verbs.as_ref())?)
    }

    pub fn lemmatizer(&self) -> &Lemmatizer {
        &self.lemmatizer
    }

    pub fn graph(&self) -> &SynsetGraph {
        &self.graph
    }

    pub fn lemmatize(&self, word: &str) -> String {
        self.lemmatizer.lemmatize(word)
    }

    pub fn is_verb(&self, lemma: &str) -> bool {
        self.verbs.contains(lemma)
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        self.graph.similarity(a, b)
    }

    /// Picks the detector label closest to `subject`: highest similarity of
    /// lemmas, then higher detector score, then lower index. With zero
    /// similarity everywhere this degrades to the highest-scoring label.
    ///
    /// Panics if `labels` is empty.
    pub fn nearest_label<S: AsRef<str>>(&self, subject: &str, labels: &[(S, f32)]) -> LabelMatch {
        assert!(!labels.is_empty(), "nearest_label needs at least one label");
        let subject = self.lemmatize(&subject.to_lowercase());
        let mut best = LabelMatch {
            index: 0,
            similarity: f64::NEG_INFINITY,
            fallback: false,
        };
        let mut best_score = f32::NEG_INFINITY;
        for (i, (label, score)) in labels.iter().enumerate() {
            let sim = self.similarity(&subject, &self.lemmatize(&label.as_ref().to_lowercase()));
            if sim > best.similarity || (sim == best.similarity && *score > best_score) {
                best = LabelMatch {
                    index: i,
                    similarity: sim,
                    fallback: false,
                };
                best_score = *score;
            }
        }
        best.fallback = best.similarity <= 0.0;
        best
    }
}

fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// One row of [`VERB_FORMS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbForms {
    pub lemma: String,
    pub third_person: String,
    pub past: String,
    pub gerund: String,
}

impl VerbForms {
    pub fn all(&self) -> [&str; 4] {
        [&self.lemma, &self.third_person, &self.past, &self.gerund]
    }
}

pub fn activity_verbs() -> Vec<VerbForms> {
    VERB_FORMS
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            VerbForms {
                lemma: f[0].into(),
                third_person: f[1].into(),
                past: f[2].into(),
                gerund: f[3].into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOY_GRAPH: &str = "root\troot\t-\n\
                             animal\tanimal\troot\n\
                             dog\tdog\tanimal\n\
                             cat\tcat\tanimal\n\
                             person\tperson\troot\n\
                             woman\twoman\tperson\n\
                             plant\tplant\troot\n\
                             tree\ttree\tplant\n";

    fn toy() -> Lexicon {
        Lexicon::from_tables(TOY_GRAPH, "").unwrap()
    }

    #[test]
    fn lemmatizes_examples() {
        let lex = Lexicon::english();
        assert_eq!(lex.lemmatize("sitting"), "sit");
        assert_eq!(lex.lemmatize("sits"), "sit");
        assert_eq!(lex.lemmatize("ran"), "run");
        assert_eq!(lex.lemmatize("grass"), "grass");
        assert_eq!(lex.lemmatize("jogging"), "jog");
        assert_eq!(lex.lemmatize("running"), "run");
        assert_eq!(lex.lemmatize("women"), "woman");
        assert_eq!(lex.lemmatize("xyzzy"), "xyzzy");
    }

    #[test]
    fn golden_table() {
        let lex = Lexicon::english();
        let rows: Vec<_> = include_str!("../../data/lemma_golden.tsv")
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split_once('\t').unwrap())
            .collect();
        assert_eq!(rows.len(), 60);
        for (surface, lemma) in rows {
            assert_eq!(lex.lemmatize(surface), lemma, "{surface}");
        }
    }

    #[test]
    fn every_activity_form_maps_to_its_lemma() {
        let lex = Lexicon::english();
        for v in activity_verbs() {
            assert!(lex.is_verb(&v.lemma), "{} not a known verb", v.lemma);
            for form in v.all() {
                assert_eq!(lex.lemmatize(form), v.lemma, "{form}");
            }
        }
    }

    #[test]
    fn lemmatize_is_idempotent_on_shipped_words() {
        let lex = Lexicon::english();
        let mut words: Vec<String> = parse_word_list(KNOWN_VERBS).into_iter().collect();
        for table in [IRREGULAR_VERBS, IRREGULAR_NOUNS] {
            for (s, l) in Lemmatizer::parse_table(table).unwrap() {
                words.push(s);
                words.push(l);
            }
        }
        words.extend(lex.graph().lemmas().map(String::from));
        for v in activity_verbs() {
            words.extend(v.all().iter().map(|s| s.to_string()));
        }
        for w in words {
            let once = lex.lemmatize(&w);
            assert!(!once.is_empty());
            assert_eq!(lex.lemmatize(&once), once, "{w}");
        }
    }

    #[test]
    fn irregular_chains_resolve() {
        let mut table = std::collections::HashMap::new();
        table.insert("laid".to_string(), "lay".to_string());
        table.insert("lay".to_string(), "lie".to_string());
        let lem = Lemmatizer::new(table, Vec::<String>::new());
        assert_eq!(lem.lemmatize("laid"), "lie");
        assert_eq!(lem.lemmatize("lie"), "lie");
    }

    #[test]
    fn toy_graph_similarity() {
        let lex = toy();
        assert_eq!(lex.similarity("dog", "dog"), 1.0);
        // dog -> animal -> cat: two edges
        assert_eq!(lex.similarity("dog", "cat"), 1.0 / 3.0);
        assert_eq!(lex.similarity("woman", "person"), 0.5);
        assert_eq!(lex.similarity("dog", "unknown"), 0.0);
        assert_eq!(lex.graph().depth("dog"), Some(2));
    }

    #[test]
    fn nearest_label_examples() {
        let lex = toy();
        // woman-person = 1/2, woman-tree = 1/4
        let m = lex.nearest_label("woman", &[("person", 0.9), ("tree", 0.8)]);
        assert_eq!(m.index, 0);
        assert_eq!(m.similarity, 0.5);
        assert!(!m.fallback);
        assert_eq!(lex.nearest_label("dog", &[("tree", 0.1)]).index, 0);
        let m = lex.nearest_label("spaceship", &[("a", 0.2), ("b", 0.7)]);
        assert_eq!(m.index, 1);
        assert!(m.fallback);
        // plural subject still resolves through lemmatization
        let m = lex.nearest_label("dogs", &[("tree", 0.9), ("cat", 0.1)]);
        assert_eq!(m.index, 1);
    }

    #[test]
    fn graph_validation() {
        assert!(SynsetGraph::parse("a\ta\t-\nb\tb\t-\n").is_err());
        assert!(SynsetGraph::parse("a\ta\tb\n").is_err());
        assert!(SynsetGraph::parse("a\ta\t-\na\tb\ta\n").is_err());
        assert!(SynsetGraph::parse("a\ta\n").is_err());
        let g = SynsetGraph::parse(SYNSETS).unwrap();
        assert_eq!(g.root(), "entity.n.01");
    }

    proptest! {
        #[test]
        fn similarity_symmetric_and_reflexive(i in 0usize..500, j in 0usize..500) {
            let lex = Lexicon::english();
            let mut lemmas: Vec<&str> = lex.graph().lemmas().collect();
            lemmas.sort();
            let a = lemmas[i % lemmas.len()];
            let b = lemmas[j % lemmas.len()];
            let s = lex.similarity(a, b);
            prop_assert_eq!(s, lex.similarity(b, a));
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(lex.similarity(a, a), 1.0);
        }

        #[test]
        fn nearest_label_permutation_equivariant(
            picks in proptest::collection::vec(0usize..500, 1..8),
            subject in 0usize..500,
            rotate in 0usize..8,
        ) {
            let lex = Lexicon::english();
            let mut lemmas: Vec<&str> = lex.graph().lemmas().collect();
            lemmas.sort();
            let subject = lemmas[subject % lemmas.len()];
            // distinct scores make the order fully determined
            let labels: Vec<(&str, f32)> = picks
                .iter()
                .enumerate()
                .map(|(k, &p)| (lemmas[p % lemmas.len()], 0.1 + k as f32 * 0.01))
                .collect();
            let n = labels.len();
            let r = rotate % n;
            let rotated: Vec<(&str, f32)> = (0..n).map(|k| labels[(k + r) % n]).collect();
            let a = lex.nearest_label(subject, &labels).index;
            let b = lex.nearest_label(subject, &rotated).index;
            prop_assert_eq!((b + r) % n, a);
        }
    }
}
