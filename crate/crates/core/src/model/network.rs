//! Forward and backward passes of the single-stream transformer.
//!
//! Sequence layout: `[CLS] w_1 .. w_n [SEP] r_1 .. r_m`. Text position `p`
//! embeds as `text_embed[token] + pos_embed[p]`; region `r` embeds as
//! `feature · roi_proj + bbox · bbox_embed` with no positional term, so region
//! order carries no information. Each layer is post-norm:
//! `h = LN1(x + MHA(x))`, `out = LN2(h + W2 · gelu(W1 · h))`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{LayerParams, ToyModelParams};
use super::Scalar;
use crate::error::{Error, Result};
use crate::text::{TokenId, CLS, SEP};
use crate::visual::VisualInput;

const LN_EPS: f64 = 1e-5;

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Framed token ids: `[CLS]`, words, `[SEP]`.
    pub tokens: Vec<TokenId>,
    pub roi_features: Array2<F>,
    pub roi_boxes: Array2<F>,
    pub layers: Vec<LayerCache<F>>,
    pub hidden: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention probabilities per head, each `seq × seq`.
    pub attention: Vec<Array2<F>>,
    context: Array2<F>,
    ln1: NormCache<F>,
    h1: Array2<F>,
    ffn_pre: Array2<F>,
    ffn_act: Array2<F>,
    ln2: NormCache<F>,
}

#[derive(Debug, Clone)]
struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// One row per text position of the framed sequence (`[CLS]` and `[SEP]` included).
    pub mlm_logits: Array2<F>,
    /// `[no-match, match]`.
    pub itm_logits: Array1<F>,
    pub cache: ForwardCache<F>,
}

impl<F> ForwardOutput<F> {
    pub fn n_text(&self) -> usize {
        self.cache.tokens.len()
    }

    pub fn attention(&self) -> Vec<&[Array2<F>]> {
        self.cache.layers.iter().map(|l| l.attention.as_slice()).collect()
    }
}

/// Upstream gradients of the scalar being differentiated with respect to the
/// model's outputs. Missing heads contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<F> {
    /// Same shape as `mlm_logits`.
    pub mlm: Option<Array2<F>>,
    pub itm: Option<Array1<F>>,
}

/// Derivatives with respect to the attention probabilities, indexed
/// `[layer][head]`.
pub type AttentionGrads<F> = Vec<Vec<Array2<F>>>;

fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).unwrap()
}

pub fn frame_tokens(words: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(words.len() + 2);
    t.push(CLS);
    t.extend_from_slice(words);
    t.push(SEP);
    t
}

pub fn forward<F: Scalar>(
    params: &ToyModelParams<F>,
    words: &[TokenId],
    image: &VisualInput,
) -> Result<ForwardOutput<F>> {
    let cfg = &params.config;
    let tokens = frame_tokens(words);
    let n_text = tokens.len();
    let n_roi = image.len();
    let seq = n_text + n_roi;
    if seq > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence of {seq} tokens exceeds max length {}",
            cfg.max_len
        )));
    }
    if n_roi == 0 {
        return Err(Error::Shape("image has no regions".into()));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
    }
    let mut roi_features = Array2::<F>::zeros((n_roi, cfg.d_visual));
    let mut roi_boxes = Array2::<F>::zeros((n_roi, 4));
    for (r, roi) in image.rois.iter().enumerate() {
        if roi.feature.len() != cfg.d_visual {
            return Err(Error::Shape(format!(
                "region {r} has {} features, model expects {}",
                roi.feature.len(),
                cfg.d_visual
            )));
        }
        for (j, &v) in roi.feature.iter().enumerate() {
            roi_features[[r, j]] = c(v as f64);
        }
        for (j, &v) in roi.bbox.as_array().iter().enumerate() {
            roi_boxes[[r, j]] = c(v as f64);
        }
    }

    let mut x = Array2::<F>::zeros((seq, cfg.d_model));
    for (p, &t) in tokens.iter().enumerate() {
        let mut row = x.row_mut(p);
        row += &params.text_embed.row(t as usize);
        row += &params.pos_embed.row(p);
    }
    {
        let mut rois = x.slice_mut(s![n_text.., ..]);
        general_mat_mul(F::one(), &roi_features, &params.roi_proj, F::zero(), &mut rois);
        general_mat_mul(F::one(), &roi_boxes, &params.bbox_embed, F::one(), &mut rois);
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = layer_forward(layer, cfg.n_heads, x);
        layers.push(cache);
        x = out;
    }

    let mlm_logits = x.slice(s![..n_text, ..]).dot(&params.text_embed.t());
    let itm_logits = x.row(0).dot(&params.itm_head);
    Ok(ForwardOutput {
        mlm_logits,
        itm_logits,
        cache: ForwardCache {
            tokens,
            roi_features,
            roi_boxes,
            layers,
            hidden: x,
        },
    })
}

fn layer_forward<F: Scalar>(p: &LayerParams<F>, n_heads: usize, x: Array2<F>) -> (Array2<F>, LayerCache<F>) {
    let (seq, d) = x.dim();
    let dh = d / n_heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let mut context = Array2::<F>::zeros((seq, d));
    let mut attention = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows(&mut scores);
        let mut ctx = context.slice_mut(cols);
        general_mat_mul(F::one(), &scores, &v.slice(cols), F::zero(), &mut ctx);
        attention.push(scores);
    }
    let mut y = context.dot(&p.wo);
    y += &x;
    let (h1, ln1) = layer_norm(&y, &p.ln1_gain, &p.ln1_bias);
    let ffn_pre = h1.dot(&p.w1);
    let ffn_act = ffn_pre.mapv(gelu);
    let mut z = ffn_act.dot(&p.w2);
    z += &h1;
    let (out, ln2) = layer_norm(&z, &p.ln2_gain, &p.ln2_bias);
    (
        out,
        LayerCache {
            input: x,
            q,
            k,
            v,
            attention,
            context,
            ln1,
            h1,
            ffn_pre,
            ffn_act,
            ln2,
        },
    )
}

pub fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Numerically stable softmax of one logit vector, returned in `f64`.
pub fn softmax<F: Scalar>(logits: ArrayView1<F>) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.to_f64().unwrap()));
    let exps: Vec<f64> = logits.iter().map(|v| (v.to_f64().unwrap() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn layer_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>, bias: &Array1<F>) -> (Array2<F>, NormCache<F>) {
    let d = c::<F>(x.ncols() as f64);
    let eps = c::<F>(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::<F>::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / d;
        *inv = F::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let mut out = &xhat * gain;
    out += bias;
    (out, NormCache { xhat, inv_std })
}

fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    gain: &Array1<F>,
    dgain: &mut Array1<F>,
    dbias: &mut Array1<F>,
) -> Array2<F> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = c::<F>(dy.ncols() as f64);
    let dxhat = dy * gain;
    let mut dx = Array2::<F>::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv / d * (d * gi - sum_g - xi * sum_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<F: Scalar>(x: F) -> F {
    let half = c::<F>(0.5);
    let inner = c::<F>(GELU_C) * (x + c::<F>(0.044715) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = c::<F>(0.5);
    let k = c::<F>(GELU_C);
    let a = c::<F>(0.044715);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + c::<F>(3.0) * a * x * x)
}

/// Accumulates parameter gradients into `grads` and returns the gradients with
/// respect to every attention map when `want_attention` is set.
pub fn backward<F: Scalar>(
    params: &ToyModelParams<F>,
    cache: &ForwardCache<F>,
    upstream: &OutputGrads<F>,
    grads: &mut ToyModelParams<F>,
    want_attention: bool,
) -> Option<AttentionGrads<F>> {
    let n_text = cache.tokens.len();
    let mut dx = Array2::<F>::zeros(cache.hidden.raw_dim());

    if let Some(dlogits) = &upstream.mlm {
        let h_text = cache.hidden.slice(s![..n_text, ..]);
        general_mat_mul(F::one(), &dlogits.t(), &h_text, F::one(), &mut grads.text_embed);
        let mut dh = dx.slice_mut(s![..n_text, ..]);
        general_mat_mul(F::one(), dlogits, &params.text_embed, F::one(), &mut dh);
    }
    if let Some(ditm) = &upstream.itm {
        let cls = cache.hidden.row(0);
        for i in 0..cls.len() {
            for j in 0..ditm.len() {
                grads.itm_head[[i, j]] += cls[i] * ditm[j];
            }
        }
        let mut row = dx.row_mut(0);
        row += &params.itm_head.dot(ditm);
    }

    let mut attention_grads = want_attention.then(|| Vec::with_capacity(params.layers.len()));
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let (next, att) = layer_backward(
            layer,
            &cache.layers[l],
            params.config.n_heads,
            dx,
            &mut grads.layers[l],
            want_attention,
        );
        dx = next;
        if let (Some(all), Some(att)) = (attention_grads.as_mut(), att) {
            all.push(att);
        }
    }
    if let Some(all) = attention_grads.as_mut() {
        all.reverse();
    }

    for (p, &t) in cache.tokens.iter().enumerate() {
        let row = dx.row(p);
        let mut e = grads.text_embed.row_mut(t as usize);
        e += &row;
        let mut pe = grads.pos_embed.row_mut(p);
        pe += &row;
    }
    let droi = dx.slice(s![n_text.., ..]);
    general_mat_mul(F::one(), &cache.roi_features.t(), &droi, F::one(), &mut grads.roi_proj);
    general_mat_mul(F::one(), &cache.roi_boxes.t(), &droi, F::one(), &mut grads.bbox_embed);
    attention_grads
}

fn layer_backward<F: Scalar>(
    p: &LayerParams<F>,
    cache: &LayerCache<F>,
    n_heads: usize,
    dout: Array2<F>,
    g: &mut LayerParams<F>,
    want_attention: bool,
) -> (Array2<F>, Option<Vec<Array2<F>>>) {
    let dz = layer_norm_backward(&dout, &cache.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    general_mat_mul(F::one(), &cache.ffn_act.t(), &dz, F::one(), &mut g.w2);
    let mut dpre = dz.dot(&p.w2.t());
    Zip::from(&mut dpre)
        .and(&cache.ffn_pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    general_mat_mul(F::one(), &cache.h1.t(), &dpre, F::one(), &mut g.w1);
    let mut dh1 = dpre.dot(&p.w1.t());
    dh1 += &dz;

    let dy = layer_norm_backward(&dh1, &cache.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    general_mat_mul(F::one(), &cache.context.t(), &dy, F::one(), &mut g.wo);
    let dctx = dy.dot(&p.wo.t());
    let mut dx = dy;

    let (seq, d) = dctx.dim();
    let dh = d / n_heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::<F>::zeros((seq, d));
    let mut dk = Array2::<F>::zeros((seq, d));
    let mut dv = Array2::<F>::zeros((seq, d));
    let mut att_grads = want_attention.then(|| Vec::with_capacity(n_heads));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &cache.attention[h];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&cache.v.slice(cols).t());
        let mut dv_h = dv.slice_mut(cols);
        general_mat_mul(F::one(), &a.t(), &dctx_h, F::zero(), &mut dv_h);
        let ds = softmax_backward(a.view(), da.view(), scale);
        let mut dq_h = dq.slice_mut(cols);
        general_mat_mul(F::one(), &ds, &cache.k.slice(cols), F::zero(), &mut dq_h);
        let mut dk_h = dk.slice_mut(cols);
        general_mat_mul(F::one(), &ds.t(), &cache.q.slice(cols), F::zero(), &mut dk_h);
        if let Some(all) = att_grads.as_mut() {
            all.push(da);
        }
    }
    let x = &cache.input;
    general_mat_mul(F::one(), &x.t(), &dq, F::one(), &mut g.wq);
    general_mat_mul(F::one(), &x.t(), &dk, F::one(), &mut g.wk);
    general_mat_mul(F::one(), &x.t(), &dv, F::one(), &mut g.wv);
    general_mat_mul(F::one(), &dq, &p.wq.t(), F::one(), &mut dx);
    general_mat_mul(F::one(), &dk, &p.wk.t(), F::one(), &mut dx);
    general_mat_mul(F::one(), &dv, &p.wv.t(), F::one(), &mut dx);
    (dx, att_grads)
}

/// Gradient of pre-softmax scores given the gradient of the probabilities,
/// folded with the score scale.
fn softmax_backward<F: Scalar>(a: ArrayView2<F>, da: ArrayView2<F>, scale: F) -> Array2<F> {
    let mut ds = Array2::<F>::zeros(a.raw_dim());
    for ((mut out, arow), darow) in ds.rows_mut().into_iter().zip(a.rows()).zip(da.rows()) {
        let dot = arow.dot(&darow);
        Zip::from(&mut out)
            .and(&arow)
            .and(&darow)
            .for_each(|o, &ai, &dai| *o = ai * (dai - dot) * scale);
    }
    ds
}

/// Cross-entropy of `logits` against `target` and its gradient scaled by `weight`.
pub fn cross_entropy<F: Scalar>(logits: ArrayView1<F>, target: usize, weight: f64) -> (f64, Array1<F>) {
    let probs = softmax(logits);
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.to_f64().unwrap()));
    let log_norm = logits
        .iter()
        .map(|v| (v.to_f64().unwrap() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    let loss = log_norm - logits[target].to_f64().unwrap();
    let grad = Array1::from_iter(
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| c::<F>(weight * (p - if i == target { 1.0 } else { 0.0 }))),
    );
    (loss, grad)
}
