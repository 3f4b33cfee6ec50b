//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlprobe::model::network::{backward, cross_entropy, forward, OutputGrads};
use vlprobe::model::{ToyConfig, ToyModelParams};
use vlprobe::text::{TokenId, MASK};
use vlprobe::visual::{BBox, RoiFeature, VisualInput};

pub fn tiny_config() -> ToyConfig {
    ToyConfig {
        vocab_size: 20,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_visual: 6,
        max_len: 12,
        ffn_dim: 64,
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, n: usize, d_v: usize) -> VisualInput {
    let rois = (0..n)
        .map(|i| {
            let x1: f32 = rng.random_range(0.0..0.5);
            let y1: f32 = rng.random_range(0.0..0.5);
            RoiFeature {
                bbox: BBox::new(x1, y1, x1 + rng.random_range(0.1..0.5), y1 + rng.random_range(0.1..0.5)).unwrap(),
                feature: (0..d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: format!("r{i}"),
                score: 0.5,
            }
        })
        .collect();
    VisualInput::new("img", rois).unwrap()
}

/// Fixed loss touching every parameter: cross-entropy at two masked positions
/// plus the matching loss.
pub struct GradProblem {
    pub words: Vec<TokenId>,
    pub image: VisualInput,
    pub mlm_targets: Vec<(usize, usize)>,
    pub itm_label: Option<usize>,
    pub scale: f64,
}

impl GradProblem {
    pub fn standard(seed: u64, cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<TokenId> = vec![7, MASK, 9, MASK, 12];
        GradProblem {
            words,
            image: random_image(&mut rng, 3, cfg.d_visual),
            mlm_targets: vec![(1, 8), (3, 15)],
            itm_label: Some(1),
            scale: 1.0,
        }
    }

    pub fn loss(&self, params: &ToyModelParams<f64>) -> f64 {
        let out = forward(params, &self.words, &self.image).unwrap();
        let mut total = 0.0;
        for &(p, t) in &self.mlm_targets {
            total += cross_entropy(out.mlm_logits.row(p + 1), t, 1.0).0;
        }
        if let Some(l) = self.itm_label {
            total += cross_entropy(out.itm_logits.view(), l, 1.0).0;
        }
        total * self.scale
    }

    pub fn gradient(&self, params: &ToyModelParams<f64>) -> ToyModelParams<f64> {
        let out = forward(params, &self.words, &self.image).unwrap();
        let mut upstream = OutputGrads::default();
        if !self.mlm_targets.is_empty() {
            let mut g = Array2::zeros(out.mlm_logits.raw_dim());
            for &(p, t) in &self.mlm_targets {
                let (_, row) = cross_entropy(out.mlm_logits.row(p + 1), t, self.scale);
                let mut r = g.row_mut(p + 1);
                r += &row;
            }
            upstream.mlm = Some(g);
        }
        if let Some(l) = self.itm_label {
            let (_, g): (f64, Array1<f64>) = cross_entropy(out.itm_logits.view(), l, self.scale);
            upstream.itm = Some(g);
        }
        let mut grads = ToyModelParams::zeros(params.config);
        backward(params, &out.cache, &upstream, &mut grads, false);
        grads
    }
}

/// Per-tensor relative error `|a - n| / (|a| + |n|)` between analytic and
/// central-difference gradients (0 when both vanish).
pub fn finite_difference_errors(problem: &GradProblem, params: &ToyModelParams<f64>, step: f64) -> Vec<(String, f64)> {
    let analytic = problem.gradient(params);
    let mut work = params.clone();
    let n_tensors = params.tensors().len();
    let mut out = Vec::with_capacity(n_tensors);
    for t in 0..n_tensors {
        let len = params.tensors()[t].1.len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = *work.tensors_mut()[t].1.iter_mut().nth(i).unwrap();
            *work.tensors_mut()[t].1.iter_mut().nth(i).unwrap() = orig + step;
            let plus = problem.loss(&work);
            *work.tensors_mut()[t].1.iter_mut().nth(i).unwrap() = orig - step;
            let minus = problem.loss(&work);
            *work.tensors_mut()[t].1.iter_mut().nth(i).unwrap() = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let tensors = analytic.tensors();
        let (name, a) = &tensors[t];
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na + nn == 0.0 { 0.0 } else { diff / (na + nn) };
        out.push((name.clone(), rel));
    }
    out
}
