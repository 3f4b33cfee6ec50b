//! Gradient-weighted attention rollout.
//!
//! For each layer, `Ā = mean_h max(0, A_h ⊙ ∂y/∂A_h)`. Starting from
//! `R = I`, each layer applies `R ← R + Ā·R`; the relevancy of input position
//! `p` for the readout position `t` is `R[t, p]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionTrace, ModelBackend, ReadoutTarget, TextInput};
use crate::visual::VisualInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyMap {
    /// Framed text tokens: `[CLS]`, the caption words (the masked one shown as
    /// `[MASK]`), `[SEP]`.
    pub text_tokens: Vec<String>,
    pub text_scores: Vec<f64>,
    pub roi_labels: Vec<String>,
    pub roi_scores: Vec<f64>,
    pub target: ReadoutTarget,
}

impl RelevancyMap {
    /// Index of the most relevant region; ties go to the lower index.
    pub fn top_roi(&self) -> Option<usize> {
        self.roi_scores
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i)
    }
}

/// Rolls out a trace and returns the readout row over all positions.
pub fn rollout(trace: &AttentionTrace) -> Result<Vec<f64>> {
    let seq = trace.n_text + trace.n_rois;
    if trace.readout_position >= seq {
        return Err(Error::Shape(format!(
            "readout position {} outside sequence of {seq}",
            trace.readout_position
        )));
    }
    if trace.attention.len() != trace.gradients.len() {
        return Err(Error::Shape("attention and gradient layer counts differ".into()));
    }
    let mut r = Array2::<f64>::eye(seq);
    for (att, grad) in trace.attention.iter().zip(&trace.gradients) {
        if att.is_empty() || att.len() != grad.len() {
            return Err(Error::Shape("attention and gradient head counts differ".into()));
        }
        let mut mean = Array2::<f64>::zeros((seq, seq));
        for (a, g) in att.iter().zip(grad) {
            if a.dim() != (seq, seq) || g.dim() != (seq, seq) {
                return Err(Error::Shape(format!("attention map is not {seq}x{seq}")));
            }
            ndarray::Zip::from(&mut mean)
                .and(a)
                .and(g)
                .for_each(|m, &a, &g| *m += (a * g).max(0.0));
        }
        mean.mapv_inplace(|v| v / att.len() as f64);
        r = &r + &mean.dot(&r);
    }
    Ok(r.row(trace.readout_position).to_vec())
}

pub fn relevancy(
    backend: &dyn ModelBackend,
    image: &VisualInput,
    text: TextInput<'_>,
    target: ReadoutTarget,
) -> Result<RelevancyMap> {
    if !backend.capabilities().attention_introspection {
        return Err(Error::Capability("attention_introspection"));
    }
    let trace = backend.attention_trace(image, text, target)?;
    let row = rollout(&trace)?;
    let mut text_tokens = vec!["[CLS]".to_string()];
    match text {
        TextInput::Plain(c) => text_tokens.extend(c.words.iter().cloned()),
        TextInput::Masked(m) => text_tokens.extend(m.words()),
    }
    text_tokens.push("[SEP]".to_string());
    if text_tokens.len() != trace.n_text || image.len() != trace.n_rois {
        return Err(Error::Shape("backend trace does not match the input".into()));
    }
    Ok(RelevancyMap {
        text_tokens,
        text_scores: row[..trace.n_text].to_vec(),
        roi_labels: image.rois.iter().map(|r| r.label.clone()).collect(),
        roi_scores: row[trace.n_text..].to_vec(),
        target,
    })
}

pub const CANVAS: usize = 256;

/// Encodes region relevancy as a binary PPM: each region is a filled
/// rectangle whose red intensity is its score relative to the largest region
/// score; where regions overlap the larger value wins.
pub fn heatmap_ppm(map: &RelevancyMap, image: &VisualInput, size: usize) -> Vec<u8> {
    let max = map.roi_scores.iter().cloned().fold(0.0, f64::max);
    let mut heat = vec![0.0f64; size * size];
    for (roi, &score) in image.rois.iter().zip(&map.roi_scores) {
        let v = if max > 0.0 { score / max } else { 0.0 };
        let px = |c: f32| ((c as f64 * size as f64).round() as usize).min(size);
        let (x1, y1, x2, y2) = (px(roi.bbox.x1), px(roi.bbox.y1), px(roi.bbox.x2), px(roi.bbox.y2));
        for y in y1..y2 {
            for h in &mut heat[y * size + x1..y * size + x2] {
                *h = h.max(v);
            }
        }
    }
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    for h in heat {
        let hot = (h * 255.0).round() as u8;
        out.extend_from_slice(&[hot, 0, 255 - hot]);
    }
    out
}

/// `token\tscore` lines for the text, then one line per region named
/// `roi<i>:<label>`.
pub fn token_bars(map: &RelevancyMap) -> String {
    let mut out = String::new();
    for (t, s) in map.text_tokens.iter().zip(&map.text_scores) {
        let _ = writeln!(out, "{t}\t{s}");
    }
    for (i, (l, s)) in map.roi_labels.iter().zip(&map.roi_scores).enumerate() {
        let _ = writeln!(out, "roi{i}:{l}\t{s}");
    }
    out
}

/// Writes `<stem>.ppm` and `<stem>.tsv`.
pub fn render_heatmap(map: &RelevancyMap, image: &VisualInput, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let stem = stem.as_ref();
    let ppm = stem.with_extension("ppm");
    let tsv = stem.with_extension("tsv");
    fs::write(&ppm, heatmap_ppm(map, image, CANVAS)).map_err(|e| Error::io(&ppm, e))?;
    fs::write(&tsv, token_bars(map)).map_err(|e| Error::io(&tsv, e))?;
    Ok((ppm, tsv))
}
