//! Zero-shot image-text matching, with accuracy split by pair label.

use serde::{Deserialize, Serialize};

use super::ablation::{apply, Ablation};
use super::guided::ratio;
use super::ProbeConfig;
use crate::dataset::{PairLabel, ProbeSample};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lexicon::Lexicon;
use crate::model::{itm_probability, ModelBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmResult {
    pub ablation: Ablation,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub hits_pos: usize,
    pub hits_neg: usize,
    /// Accuracies are 0 over an empty group.
    pub acc_pos: f64,
    pub acc_neg: f64,
    /// Count-weighted mean of `acc_pos` and `acc_neg`.
    pub acc_avg: f64,
    pub n_skipped: usize,
    pub fallback_subject_count: usize,
}

impl ItmResult {
    /// Builds the result from hit counts; `acc_avg` is computed from the
    /// per-label accuracies so the weighted-mean identity holds exactly.
    pub fn from_counts(ablation: Ablation, threshold: f64, n_pos: usize, hits_pos: usize, n_neg: usize, hits_neg: usize) -> Self {
        let acc_pos = ratio(hits_pos, n_pos);
        let acc_neg = ratio(hits_neg, n_neg);
        ItmResult {
            ablation,
            threshold,
            n_pos,
            n_neg,
            hits_pos,
            hits_neg,
            acc_pos,
            acc_neg,
            acc_avg: weighted_mean(n_pos, acc_pos, n_neg, acc_neg),
            n_skipped: 0,
            fallback_subject_count: 0,
        }
    }
}

pub fn weighted_mean(n_pos: usize, acc_pos: f64, n_neg: usize, acc_neg: f64) -> f64 {
    let n = n_pos + n_neg;
    if n == 0 {
        0.0
    } else {
        (n_pos as f64 * acc_pos + n_neg as f64 * acc_neg) / n as f64
    }
}

/// Predicts "match" when the match probability reaches the threshold and
/// scores it against each sample's pair label.
pub fn run_itm(
    samples: &[ProbeSample],
    backend: &dyn ModelBackend,
    config: &ProbeConfig,
    ablation: Ablation,
    lexicon: &Lexicon,
    exec: &Executor,
) -> Result<ItmResult> {
    config.validate()?;
    if !backend.capabilities().itm {
        return Err(Error::Capability("itm"));
    }
    let outcomes = exec.map(samples, |s| {
        let (image, trace) = apply(ablation, s, lexicon);
        let fallback = trace.is_some_and(|t| t.fallback);
        itm_probability(backend, &image, &s.caption).map(|p| (p >= config.itm_threshold, fallback))
    });
    let (mut n_pos, mut n_neg, mut hits_pos, mut hits_neg, mut failed, mut fallbacks) = (0, 0, 0, 0, 0, 0);
    for (s, outcome) in samples.iter().zip(outcomes) {
        let (says_match, fallback) = match outcome {
            Ok(v) => v,
            Err(e @ Error::Capability(_)) => return Err(e),
            Err(_) => {
                failed += 1;
                continue;
            }
        };
        fallbacks += usize::from(fallback);
        match s.pair_label {
            PairLabel::Positive => {
                n_pos += 1;
                hits_pos += usize::from(says_match);
            }
            PairLabel::Negative => {
                n_neg += 1;
                hits_neg += usize::from(!says_match);
            }
        }
    }
    if failed * 100 > samples.len() {
        return Err(Error::TooManyBackendErrors {
            failed,
            total: samples.len(),
        });
    }
    let mut r = ItmResult::from_counts(ablation, config.itm_threshold, n_pos, hits_pos, n_neg, hits_neg);
    r.n_skipped = failed;
    r.fallback_subject_count = fallbacks;
    Ok(r)
}
