//! Guided masking: mask the target word, ask the model to fill it in under
//! each visual condition, and score the lemmatized top-k.

use serde::{Deserialize, Serialize};

use super::ablation::{ablate_subject, ablate_whole_image};
use super::{match_rank, Condition, ProbeConfig};
use crate::dataset::{PairLabel, ProbeSample};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lexicon::Lexicon;
use crate::model::{predict_masked, ModelBackend, PredictionDistribution};
use crate::text::mask_at;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKCount {
    pub k: usize,
    pub hits: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub k: usize,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    pub n_no_target: usize,
    pub n_backend_errors: usize,
    pub top_k_hits: usize,
    /// `top_k_hits / n_evaluated`, 0 when nothing was evaluated.
    pub accuracy: f64,
    /// Hits at every reported cutoff.
    pub at_k: Vec<TopKCount>,
    /// Subject ablations that fell back to the highest-scoring region.
    pub fallback_subject_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedRun {
    /// Positive samples considered; `n_evaluated + n_skipped` for every condition.
    pub n_samples: usize,
    pub results: Vec<ConditionResult>,
    /// First per-sample backend error message, if any were skipped.
    pub first_error: Option<String>,
}

impl GuidedRun {
    pub fn result(&self, condition: Condition) -> Option<&ConditionResult> {
        self.results.iter().find(|r| r.condition == condition)
    }

    pub fn accuracy(&self, condition: Condition) -> Option<f64> {
        self.result(condition).map(|r| r.accuracy)
    }
}

#[derive(Debug)]
enum Outcome {
    /// Rank of the first matching prediction, if any.
    Scored { rank: Option<usize>, fallback: bool },
    NoTarget,
    Failed(Error),
}

pub fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// The distribution a condition yields for one sample.
pub fn predict_condition(
    backend: &dyn ModelBackend,
    sample: &ProbeSample,
    condition: Condition,
    lexicon: &Lexicon,
) -> Result<(PredictionDistribution, bool)> {
    let index = sample
        .target_index
        .ok_or_else(|| Error::NoTargetWord(sample.caption.raw.clone()))?;
    let masked = mask_at(&sample.caption, index)?;
    match condition {
        Condition::Guided => Ok((predict_masked(backend, &sample.image, &masked)?, false)),
        Condition::SubjectAblation => {
            let (image, trace) = ablate_subject(sample, lexicon);
            Ok((predict_masked(backend, &image, &masked)?, trace.fallback))
        }
        Condition::WholeImage => Ok((predict_masked(backend, &ablate_whole_image(&sample.image), &masked)?, false)),
        Condition::TextOnly => {
            if !backend.capabilities().mlm {
                return Err(Error::Capability("mlm"));
            }
            Ok((backend.predict_text_only(&masked)?, false))
        }
    }
}

fn evaluate(backend: &dyn ModelBackend, sample: &ProbeSample, condition: Condition, lexicon: &Lexicon) -> Outcome {
    let Some(word) = sample.target_word() else {
        return Outcome::NoTarget;
    };
    match predict_condition(backend, sample, condition, lexicon) {
        Ok((dist, fallback)) => Outcome::Scored {
            rank: match_rank(word, &dist, lexicon),
            fallback,
        },
        Err(Error::NoTargetWord(_)) => Outcome::NoTarget,
        Err(e) => Outcome::Failed(e),
    }
}

/// Runs every configured condition over the positive samples of `samples`,
/// in dataset order. Samples without a target word count as skipped, and so
/// do per-sample backend failures as long as they stay within 1% of the
/// samples; beyond that the run aborts.
pub fn run_guided_masking(
    samples: &[ProbeSample],
    backend: &dyn ModelBackend,
    config: &ProbeConfig,
    lexicon: &Lexicon,
    exec: &Executor,
) -> Result<GuidedRun> {
    config.validate()?;
    let positives: Vec<&ProbeSample> = samples.iter().filter(|s| s.pair_label == PairLabel::Positive).collect();
    let n = positives.len();
    let ks = config.all_ks();
    let mut results = Vec::with_capacity(config.conditions.len());
    let mut first_error = None;
    for &condition in &config.conditions {
        let outcomes = exec.map(&positives, |s| evaluate(backend, s, condition, lexicon));
        let mut r = ConditionResult {
            condition,
            k: config.k,
            n_evaluated: 0,
            n_skipped: 0,
            n_no_target: 0,
            n_backend_errors: 0,
            top_k_hits: 0,
            accuracy: 0.0,
            at_k: ks.iter().map(|&k| TopKCount { k, hits: 0, accuracy: 0.0 }).collect(),
            fallback_subject_count: 0,
        };
        for outcome in outcomes {
            match outcome {
                Outcome::Scored { rank, fallback } => {
                    r.n_evaluated += 1;
                    r.fallback_subject_count += usize::from(fallback);
                    if let Some(rank) = rank {
                        r.top_k_hits += usize::from(rank <= config.k);
                        for c in &mut r.at_k {
                            c.hits += usize::from(rank <= c.k);
                        }
                    }
                }
                Outcome::NoTarget => r.n_no_target += 1,
                Outcome::Failed(e @ Error::Capability(_)) => return Err(e),
                Outcome::Failed(e) => {
                    r.n_backend_errors += 1;
                    first_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if r.n_backend_errors * 100 > n {
            return Err(Error::TooManyBackendErrors {
                failed: r.n_backend_errors,
                total: n,
            });
        }
        r.n_skipped = r.n_no_target + r.n_backend_errors;
        r.accuracy = ratio(r.top_k_hits, r.n_evaluated);
        for c in &mut r.at_k {
            c.accuracy = ratio(c.hits, r.n_evaluated);
        }
        results.push(r);
    }
    Ok(GuidedRun {
        n_samples: n,
        results,
        first_error,
    })
}
