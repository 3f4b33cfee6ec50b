//! The toy multimodal transformer and the backend contract every prober uses.

pub mod checkpoint;
pub mod network;
pub mod params;
pub mod remote;
pub mod toy;
pub mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use ndarray::{Array2, NdFloat};
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};

pub use network::{backward, forward, ForwardOutput, OutputGrads};
pub use params::{LayerParams, ToyConfig, ToyModelParams};
pub use toy::ToyBackend;

use crate::error::{Error, Result};
use crate::text::{Caption, MaskedCaption, TokenId, Vocabulary};
use crate::visual::VisualInput;

/// Floating-point types the toy model can run in. Training uses `f32`; the
/// gradient checker runs in `f64`.
pub trait Scalar: NdFloat + FromPrimitive + Sum + Debug + Display {}
impl<T: NdFloat + FromPrimitive + Sum + Debug + Display> Scalar for T {}

/// Probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    probs: Vec<f64>,
    vocab: Arc<Vocabulary>,
}

impl PredictionDistribution {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>, vocab: Arc<Vocabulary>) -> Result<Self> {
        if probs.len() != vocab.len() {
            return Err(Error::Shape(format!(
                "distribution over {} entries for a vocabulary of {}",
                probs.len(),
                vocab.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::backend("distribution has negative or non-finite entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::backend(format!("distribution sums to {total}")));
        }
        Ok(PredictionDistribution { probs, vocab })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prob(&self, token: &str) -> f64 {
        self.vocab.id(token).map_or(0.0, |id| self.probs[id as usize])
    }

    /// The `k` most probable tokens, excluding `[PAD]`, `[CLS]`, `[SEP]` and
    /// `[MASK]`; ties go to the lower token id.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        use crate::text::{CLS, MASK, PAD, SEP};
        let mut ranked: Vec<(TokenId, f64)> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as TokenId, p))
            .filter(|(id, _)| ![PAD, CLS, SEP, MASK].contains(id))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    pub fn top_k_words(&self, k: usize) -> Vec<(&str, f64)> {
        self.top_k(k)
            .into_iter()
            .map(|(id, p)| (self.vocab.token(id).unwrap_or("[UNK]"), p))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub mlm: bool,
    pub itm: bool,
    pub attention_introspection: bool,
}

/// Which scalar output a relevancy map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReadoutTarget {
    /// ITM logit of a class (`1` = match), read at `[CLS]`.
    ItmClass { class: usize },
    /// MLM logit of `token` at caption word `word_index`; `None` explains the
    /// most probable token.
    MaskedToken { word_index: usize, token: Option<TokenId> },
}

/// Attention maps and the gradients of a readout with respect to them,
/// indexed `[layer][head]`, each `seq × seq`.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub attention: Vec<Vec<Array2<f64>>>,
    pub gradients: Vec<Vec<Array2<f64>>>,
    /// Framed text length (`[CLS]` and `[SEP]` included).
    pub n_text: usize,
    pub n_rois: usize,
    /// Sequence position whose output is being explained.
    pub readout_position: usize,
}

/// Text passed to a backend: either a plain caption or a masked one.
#[derive(Debug, Clone, Copy)]
pub enum TextInput<'a> {
    Plain(&'a Caption),
    Masked(&'a MaskedCaption),
}

impl TextInput<'_> {
    pub fn tokens(&self) -> Vec<TokenId> {
        match self {
            TextInput::Plain(c) => c.tokens.clone(),
            TextInput::Masked(m) => m.tokens(),
        }
    }

    pub fn words(&self) -> Vec<String> {
        match self {
            TextInput::Plain(c) => c.words.clone(),
            TextInput::Masked(m) => m.words(),
        }
    }
}

/// A model that can be probed. Implementations must be pure: identical inputs
/// give identical outputs.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    /// Width of the region features the backend consumes.
    fn visual_dim(&self) -> usize;

    /// Distribution over the vocabulary at the masked position.
    fn predict_masked(&self, image: &VisualInput, masked: &MaskedCaption) -> Result<PredictionDistribution>;

    /// Probability of the "match" class.
    fn itm_probability(&self, image: &VisualInput, caption: &Caption) -> Result<f64> {
        let _ = (image, caption);
        Err(Error::Capability("itm"))
    }

    /// Masked prediction with no visual evidence. The default feeds a single
    /// blank region so single-stream models keep a valid input shape.
    fn predict_text_only(&self, masked: &MaskedCaption) -> Result<PredictionDistribution> {
        let blank = VisualInput::blank("text-only", self.visual_dim());
        self.predict_masked(&blank, masked)
    }

    fn attention_trace(
        &self,
        image: &VisualInput,
        text: TextInput<'_>,
        target: ReadoutTarget,
    ) -> Result<AttentionTrace> {
        let _ = (image, text, target);
        Err(Error::Capability("attention_introspection"))
    }
}

pub fn predict_masked(
    backend: &dyn ModelBackend,
    image: &VisualInput,
    masked: &MaskedCaption,
) -> Result<PredictionDistribution> {
    if !backend.capabilities().mlm {
        return Err(Error::Capability("mlm"));
    }
    backend.predict_masked(image, masked)
}

pub fn itm_probability(backend: &dyn ModelBackend, image: &VisualInput, caption: &Caption) -> Result<f64> {
    if !backend.capabilities().itm {
        return Err(Error::Capability("itm"));
    }
    backend.itm_probability(image, caption)
}
