//! Closed-vocabulary whitespace tokenizer, captions and single-word masking.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Ordered, duplicate-free token list with the five reserved tokens at fixed
/// indices `0..5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary words. Words are lowercased; duplicates
    /// and words colliding with reserved tokens are dropped, first occurrence wins.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            vocab.push(r.to_string());
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !w.is_empty() && !vocab.index.contains_key(&w) {
                vocab.push(w);
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from a full token list (reserved tokens included),
    /// as stored in checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Schema(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut vocab = Vocabulary {
            tokens: Vec::with_capacity(tokens.len()),
            index: HashMap::with_capacity(tokens.len()),
        };
        for t in tokens {
            if vocab.index.contains_key(&t) {
                return Err(Error::Schema(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.push(t);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len() as TokenId);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ordinary (non-reserved) words in index order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[RESERVED.len()..].iter().map(String::as_str)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }
}

/// A tokenized caption. `tokens` and `words` are aligned and exclude the
/// `[CLS]`/`[SEP]` frame, which the model adds itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub raw: String,
    pub tokens: Vec<TokenId>,
    pub words: Vec<String>,
}

impl Caption {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Lowercases, strips punctuation and collapses whitespace. Internal
/// apostrophes and hyphens survive ("t-shirt", "man's").
pub fn normalize_words(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .filter_map(|chunk| {
            let lowered = chunk.to_lowercase();
            let trimmed = lowered.trim_matches(|c: char| !c.is_alphanumeric());
            let word: String = trimmed
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'' || *c == '-')
                .collect();
            (!word.is_empty()).then_some(word)
        })
        .collect()
}

pub fn tokenize(raw: &str, vocab: &Vocabulary) -> Result<Caption> {
    let words = normalize_words(raw);
    if words.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let tokens = words.iter().map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    Ok(Caption {
        raw: raw.to_string(),
        tokens,
        words,
    })
}

/// Rebuilds a caption from already-normalized words.
pub fn caption_from_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Result<Caption> {
    let raw = words
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ");
    tokenize(&raw, vocab)
}

pub fn detokenize(caption: &Caption) -> String {
    caption.words.join(" ")
}

/// A caption with exactly one word replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedCaption {
    pub base: Caption,
    pub mask_index: usize,
    pub original_word: String,
}

impl MaskedCaption {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.base.tokens.clone();
        t[self.mask_index] = MASK;
        t
    }

    pub fn words(&self) -> Vec<String> {
        let mut w = self.base.words.clone();
        w[self.mask_index] = RESERVED[MASK as usize].to_string();
        w
    }

    pub fn unmask(&self) -> Caption {
        self.base.clone()
    }
}

pub fn mask_at(caption: &Caption, index: usize) -> Result<MaskedCaption> {
    if index >= caption.len() {
        return Err(Error::BadIndex {
            index,
            len: caption.len(),
        });
    }
    Ok(MaskedCaption {
        base: caption.clone(),
        mask_index: index,
        original_word: caption.words[index].clone(),
    })
}

/// Picks the word to probe. A gold index wins when supplied; otherwise the
/// first word after position 0 whose lemma is a known verb.
pub fn find_verb_index(caption: &Caption, gold: Option<usize>, lexicon: &Lexicon) -> Result<usize> {
    if let Some(i) = gold {
        if i >= caption.len() {
            return Err(Error::BadIndex {
                index: i,
                len: caption.len(),
            });
        }
        return Ok(i);
    }
    caption
        .words
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, w)| lexicon.is_verb(&lexicon.lemmatize(w)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::NoTargetWord(caption.raw.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig2_vocab() -> Vocabulary {
        Vocabulary::new(["a", "girl", "sitting", "on", "grass"])
    }

    #[test]
    fn reserved_indices_are_fixed() {
        let v = fig2_vocab();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), Some(i as TokenId));
        }
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.len(), 10);
    }

    #[test]
    fn tokenizes_fig2_caption() {
        let c = tokenize("A girl sitting on grass.", &fig2_vocab()).unwrap();
        assert_eq!(c.words, ["a", "girl", "sitting", "on", "grass"]);
        assert!(c.tokens.iter().all(|&t| t != UNK));
    }

    #[test]
    fn empty_caption_is_rejected() {
        assert!(matches!(tokenize("", &fig2_vocab()), Err(Error::EmptyCaption)));
        assert!(matches!(tokenize(" ... !", &fig2_vocab()), Err(Error::EmptyCaption)));
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::new(["run"]);
        let c = tokenize("RUN run", &v).unwrap();
        let run = v.id("run").unwrap();
        assert_eq!(c.tokens, vec![run, run]);
    }

    #[test]
    fn oov_keeps_surface_form() {
        let c = tokenize("A zebra sitting", &fig2_vocab()).unwrap();
        assert_eq!(c.tokens[1], UNK);
        assert_eq!(c.words[1], "zebra");
    }

    #[test]
    fn masks_the_verb() {
        let v = fig2_vocab();
        let c = tokenize("A girl sitting on grass.", &v).unwrap();
        let m = mask_at(&c, 2).unwrap();
        assert_eq!(m.words(), ["a", "girl", "[MASK]", "on", "grass"]);
        assert_eq!(m.original_word, "sitting");
        assert_eq!(m.tokens().iter().filter(|&&t| t == MASK).count(), 1);
        assert_eq!(m.unmask(), c);
        assert!(matches!(mask_at(&c, 5), Err(Error::BadIndex { index: 5, len: 5 })));
    }

    #[test]
    fn verb_heuristic() {
        let lex = Lexicon::english();
        let v = fig2_vocab();
        let c = tokenize("A girl sitting on grass.", &v).unwrap();
        // "sitting" is the only word whose lemma is a shipped verb.
        let verbs: Vec<_> = c
            .words
            .iter()
            .filter(|w| lex.is_verb(&lex.lemmatize(w)))
            .collect();
        assert_eq!(verbs, ["sitting"]);
        assert_eq!(find_verb_index(&c, None, &lex).unwrap(), 2);
        assert_eq!(find_verb_index(&c, Some(4), &lex).unwrap(), 4);
        let verbless = tokenize("a girl", &v).unwrap();
        assert!(matches!(
            find_verb_index(&verbless, None, &lex),
            Err(Error::NoTargetWord(_))
        ));
    }

    #[test]
    fn vocabulary_from_tokens_rejects_duplicates() {
        let mut toks: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        toks.push("x".into());
        toks.push("x".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    proptest! {
        #[test]
        fn vocabulary_round_trips(words in proptest::collection::vec("[a-z]{1,8}", 0..40)) {
            let v = Vocabulary::new(&words);
            for w in &words {
                let id = v.id(w).unwrap();
                prop_assert_eq!(v.token(id), Some(w.as_str()));
            }
            let rebuilt = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
            prop_assert_eq!(rebuilt, v);
        }

        #[test]
        fn detokenize_round_trip(raw in "[A-Za-z ,.!]{0,60}") {
            let v = fig2_vocab();
            match tokenize(&raw, &v) {
                Ok(c) => {
                    let text = detokenize(&c);
                    let again = tokenize(&text, &v).unwrap();
                    prop_assert_eq!(detokenize(&again), text.clone());
                    prop_assert_eq!(text, normalize_words(&raw).join(" "));
                }
                Err(Error::EmptyCaption) => prop_assert!(normalize_words(&raw).is_empty()),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn mask_unmask_inverse(n in 1usize..12, pick in 0usize..100) {
            let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let v = Vocabulary::new(&words);
            let c = caption_from_words(&words, &v).unwrap();
            let i = pick % n;
            let m = mask_at(&c, i).unwrap();
            prop_assert_eq!(m.unmask(), c.clone());
            prop_assert_eq!(&m.original_word, &c.words[i]);
        }
    }
}
