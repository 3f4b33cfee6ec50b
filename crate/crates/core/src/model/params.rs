use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Architecture hyper-parameters of the toy single-stream transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_visual: usize,
    /// Maximum sequence length: `[CLS]`, words, `[SEP]` and regions together.
    pub max_len: usize,
    pub ffn_dim: usize,
}

impl ToyConfig {
    /// d=64, 4 heads, 2 layers, 32 visual channels, length 32.
    pub fn reference(vocab_size: usize) -> Self {
        ToyConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_visual: 32,
            max_len: 32,
            ffn_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < crate::text::RESERVED.len() || self.max_len < 3 || self.d_visual == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    pub w1: Array2<F>,
    pub w2: Array2<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
}

/// All weights of the toy model. The masked-LM head is tied to `text_embed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams<F> {
    pub config: ToyConfig,
    pub text_embed: Array2<F>,
    pub roi_proj: Array2<F>,
    pub bbox_embed: Array2<F>,
    pub pos_embed: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub itm_head: Array2<F>,
}

impl<F: Scalar> ToyModelParams<F> {
    pub fn zeros(config: ToyConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w1: Array2::zeros((d, config.ffn_dim)),
            w2: Array2::zeros((config.ffn_dim, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        };
        ToyModelParams {
            config,
            text_embed: Array2::zeros((config.vocab_size, d)),
            roi_proj: Array2::zeros((config.d_visual, d)),
            bbox_embed: Array2::zeros((4, d)),
            pos_embed: Array2::zeros((config.max_len, d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            itm_head: Array2::zeros((d, 2)),
        }
    }

    /// Gaussian initialization; projections scaled by `1/sqrt(fan_in)`,
    /// embeddings at 0.1, layer-norm gains at one.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let mut fill = |a: &mut Array2<F>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            a.mapv_inplace(|_| F::from_f64(normal.sample(&mut rng)).unwrap());
        };
        let d = config.d_model as f64;
        fill(&mut p.text_embed, 0.1);
        fill(&mut p.pos_embed, 0.1);
        fill(&mut p.bbox_embed, 0.1);
        fill(&mut p.roi_proj, 0.1 / (config.d_visual as f64).sqrt());
        for layer in &mut p.layers {
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1] {
                fill(w, 1.0 / d.sqrt());
            }
            fill(&mut layer.w2, 1.0 / (config.ffn_dim as f64).sqrt());
            layer.ln1_gain.fill(F::one());
            layer.ln2_gain.fill(F::one());
        }
        fill(&mut p.itm_head, 1.0 / d.sqrt());
        Ok(p)
    }

    /// Named views of every tensor, in a fixed order shared by the optimizer,
    /// the checkpoint format and the gradient checker.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("text_embed".to_string(), self.text_embed.view().into_dyn()),
            ("roi_proj".to_string(), self.roi_proj.view().into_dyn()),
            ("bbox_embed".to_string(), self.bbox_embed.view().into_dyn()),
            ("pos_embed".to_string(), self.pos_embed.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named = [
                ("wq", l.wq.view().into_dyn()),
                ("wk", l.wk.view().into_dyn()),
                ("wv", l.wv.view().into_dyn()),
                ("wo", l.wo.view().into_dyn()),
                ("ln1_gain", l.ln1_gain.view().into_dyn()),
                ("ln1_bias", l.ln1_bias.view().into_dyn()),
                ("w1", l.w1.view().into_dyn()),
                ("w2", l.w2.view().into_dyn()),
                ("ln2_gain", l.ln2_gain.view().into_dyn()),
                ("ln2_bias", l.ln2_bias.view().into_dyn()),
            ];
            out.extend(named.into_iter().map(|(n, v)| (format!("layer{i}.{n}"), v)));
        }
        out.push(("itm_head".to_string(), self.itm_head.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![
            ("text_embed".to_string(), self.text_embed.view_mut().into_dyn()),
            ("roi_proj".to_string(), self.roi_proj.view_mut().into_dyn()),
            ("bbox_embed".to_string(), self.bbox_embed.view_mut().into_dyn()),
            ("pos_embed".to_string(), self.pos_embed.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let named = [
                ("wq", l.wq.view_mut().into_dyn()),
                ("wk", l.wk.view_mut().into_dyn()),
                ("wv", l.wv.view_mut().into_dyn()),
                ("wo", l.wo.view_mut().into_dyn()),
                ("ln1_gain", l.ln1_gain.view_mut().into_dyn()),
                ("ln1_bias", l.ln1_bias.view_mut().into_dyn()),
                ("w1", l.w1.view_mut().into_dyn()),
                ("w2", l.w2.view_mut().into_dyn()),
                ("ln2_gain", l.ln2_gain.view_mut().into_dyn()),
                ("ln2_bias", l.ln2_bias.view_mut().into_dyn()),
            ];
            out.extend(named.into_iter().map(|(n, v)| (format!("layer{i}.{n}"), v)));
        }
        out.push(("itm_head".to_string(), self.itm_head.view_mut().into_dyn()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ToyModelParams<G> {
        let mut out = ToyModelParams::<G>::zeros(self.config);
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, s| *d = G::from_f64(s.to_f64().unwrap()).unwrap());
        }
        out
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: F, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(alpha, &b);
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * alpha);
        }
    }
}
