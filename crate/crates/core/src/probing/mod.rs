//! Guided-masking probes, vision ablation, image-text matching evaluation and
//! reports.

pub mod ablation;
pub mod guided;
pub mod itm;
pub mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ablation::{ablate_subject, ablate_subject_image, ablate_whole_image, AblationTrace, Ablation};
pub use guided::{run_guided_masking, ConditionResult, GuidedRun};
pub use itm::{run_itm, ItmResult};
pub use report::{emit_report, format_table, load_report, merge_reports, ProbeReport};

use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::model::PredictionDistribution;

/// Visual input under which the masked word is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// The full image.
    Guided,
    /// The subject region and every region overlapping it zeroed.
    SubjectAblation,
    /// Every region zeroed, boxes kept.
    WholeImage,
    /// No visual evidence at all.
    TextOnly,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Guided,
        Condition::SubjectAblation,
        Condition::WholeImage,
        Condition::TextOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Guided => "guided",
            Condition::SubjectAblation => "subject_ablation",
            Condition::WholeImage => "whole_image",
            Condition::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

/// Parses a comma-separated condition list, keeping first occurrences.
pub fn parse_conditions(s: &str) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let c: Condition = part.parse()?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Top-k cutoff used for the headline accuracy.
    pub k: usize,
    pub conditions: Vec<Condition>,
    pub itm_threshold: f64,
    pub seed: u64,
    /// Extra cutoffs reported alongside `k`.
    pub report_ks: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 5,
            conditions: Condition::ALL.to_vec(),
            itm_threshold: 0.5,
            seed: 0,
            report_ks: vec![1, 5, 10],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.report_ks.contains(&0) {
            return Err(Error::Config("top-k cutoffs must be at least 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("no probing conditions selected".into()));
        }
        if !(0.0..=1.0).contains(&self.itm_threshold) {
            return Err(Error::Config(format!("itm threshold {} outside [0,1]", self.itm_threshold)));
        }
        Ok(())
    }

    /// `k` and `report_ks`, sorted and deduplicated.
    pub fn all_ks(&self) -> Vec<usize> {
        let mut ks = self.report_ks.clone();
        ks.push(self.k);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// 1-based rank of the first prediction whose lemma matches the lemma of
/// `original`, over the ranking used by [`PredictionDistribution::top_k`].
pub fn match_rank(original: &str, dist: &PredictionDistribution, lexicon: &Lexicon) -> Option<usize> {
    let target = lexicon.lemmatize(&original.to_lowercase());
    dist.top_k(dist.probs().len())
        .iter()
        .position(|&(id, _)| {
            let word = dist.vocabulary().token(id).unwrap_or_default();
            lexicon.lemmatize(word) == target
        })
        .map(|p| p + 1)
}

/// Whether the lemma of `original` is among the lemmas of the top `k`
/// predictions.
pub fn match_prediction(original: &str, dist: &PredictionDistribution, k: usize, lexicon: &Lexicon) -> bool {
    let target = lexicon.lemmatize(&original.to_lowercase());
    dist.top_k(k).iter().any(|&(id, _)| {
        let word = dist.vocabulary().token(id).unwrap_or_default();
        lexicon.lemmatize(word) == target
    })
}
