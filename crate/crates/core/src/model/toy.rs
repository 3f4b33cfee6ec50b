//! [`ModelBackend`] over an in-process [`ToyModelParams`].

use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::network::{backward, forward, softmax, OutputGrads};
use super::{
    AttentionTrace, Capabilities, ModelBackend, PredictionDistribution, ReadoutTarget, TextInput, ToyModelParams,
};
use crate::error::{Error, Result};
use crate::text::{Caption, MaskedCaption, Vocabulary};
use crate::visual::VisualInput;

#[derive(Debug, Clone)]
pub struct ToyBackend {
    params: Arc<ToyModelParams<f32>>,
    vocab: Arc<Vocabulary>,
    name: String,
}

impl ToyBackend {
    pub fn new(params: ToyModelParams<f32>, vocab: Vocabulary) -> Result<Self> {
        if params.config.vocab_size != vocab.len() {
            return Err(Error::Shape(format!(
                "model vocabulary of {} does not match token list of {}",
                params.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(ToyBackend {
            params: Arc::new(params),
            vocab: Arc::new(vocab),
            name: "toy".to_string(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn params(&self) -> &ToyModelParams<f32> {
        &self.params
    }

    pub fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }
}

impl ModelBackend for ToyBackend {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            mlm: true,
            itm: true,
            attention_introspection: true,
        }
    }

    fn visual_dim(&self) -> usize {
        self.params.config.d_visual
    }

    fn predict_masked(&self, image: &VisualInput, masked: &MaskedCaption) -> Result<PredictionDistribution> {
        let out = forward(&self.params, &masked.tokens(), image)?;
        let probs = softmax(out.mlm_logits.row(masked.mask_index + 1));
        PredictionDistribution::new(probs, self.vocab.clone())
    }

    fn itm_probability(&self, image: &VisualInput, caption: &Caption) -> Result<f64> {
        let out = forward(&self.params, &caption.tokens, image)?;
        Ok(softmax(out.itm_logits.view())[1])
    }

    fn attention_trace(
        &self,
        image: &VisualInput,
        text: TextInput<'_>,
        target: ReadoutTarget,
    ) -> Result<AttentionTrace> {
        let out = forward(&self.params, &text.tokens(), image)?;
        let n_text = out.n_text();
        let mut upstream = OutputGrads::default();
        let readout_position = match target {
            ReadoutTarget::ItmClass { class } => {
                if class > 1 {
                    return Err(Error::Config(format!("ITM class {class} is not 0 or 1")));
                }
                let mut g = Array1::zeros(2);
                g[class] = 1.0;
                upstream.itm = Some(g);
                0
            }
            ReadoutTarget::MaskedToken { word_index, token } => {
                let words = n_text - 2;
                if word_index >= words {
                    return Err(Error::BadIndex {
                        index: word_index,
                        len: words,
                    });
                }
                let row = out.mlm_logits.row(word_index + 1);
                let token = match token {
                    Some(t) if (t as usize) < row.len() => t as usize,
                    Some(t) => return Err(Error::Shape(format!("token id {t} outside vocabulary"))),
                    None => row
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0,
                };
                let mut g = Array2::zeros(out.mlm_logits.raw_dim());
                g[[word_index + 1, token]] = 1.0;
                upstream.mlm = Some(g);
                word_index + 1
            }
        };
        let mut grads = ToyModelParams::zeros(self.params.config);
        let att_grads = backward(&self.params, &out.cache, &upstream, &mut grads, true).unwrap_or_default();
        let to_f64 = |m: &Array2<f32>| m.mapv(f64::from);
        Ok(AttentionTrace {
            attention: out
                .cache
                .layers
                .iter()
                .map(|l| l.attention.iter().map(to_f64).collect())
                .collect(),
            gradients: att_grads.iter().map(|l| l.iter().map(to_f64).collect()).collect(),
            n_text,
            n_rois: image.len(),
            readout_position,
        })
    }
}
