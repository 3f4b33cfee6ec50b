//! Zeroing region features: the subject and everything overlapping it, or the
//! whole image. Boxes, labels, scores and region order are never changed.

use serde::{Deserialize, Serialize};

use crate::dataset::ProbeSample;
use crate::lexicon::Lexicon;
use crate::visual::VisualInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    Subject,
    Whole,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Subject => "subject",
            Ablation::Whole => "whole",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "none" => Ok(Ablation::None),
            "subject" => Ok(Ablation::Subject),
            "whole" => Ok(Ablation::Whole),
            _ => Err(crate::Error::Config(format!("unknown ablation {s:?}"))),
        }
    }
}

/// What the subject ablation did to one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTrace {
    /// Region taken to be the subject.
    pub subject_index: usize,
    pub similarity: f64,
    /// No label was related to the subject; the highest-scoring region was used.
    pub fallback: bool,
    /// Every zeroed region, the subject included, in region order.
    pub zeroed: Vec<usize>,
}

pub fn ablate_subject_image(image: &VisualInput, subject: &str, lexicon: &Lexicon) -> (VisualInput, AblationTrace) {
    let labels = image.labels();
    let m = lexicon.nearest_label(subject, &labels);
    let subject_box = image.rois[m.index].bbox;
    let mut out = image.clone();
    let mut zeroed = Vec::new();
    for (i, roi) in out.rois.iter_mut().enumerate() {
        if i == m.index || roi.bbox.intersects(&subject_box) {
            roi.feature.fill(0.0);
            zeroed.push(i);
        }
    }
    (
        out,
        AblationTrace {
            subject_index: m.index,
            similarity: m.similarity,
            fallback: m.fallback,
            zeroed,
        },
    )
}

pub fn ablate_subject(sample: &ProbeSample, lexicon: &Lexicon) -> (VisualInput, AblationTrace) {
    ablate_subject_image(&sample.image, &sample.subject_word, lexicon)
}

pub fn ablate_whole_image(image: &VisualInput) -> VisualInput {
    let mut out = image.clone();
    for roi in &mut out.rois {
        roi.feature.fill(0.0);
    }
    out
}

/// The image a condition sees, plus the subject trace when one was computed.
pub fn apply<'a>(
    ablation: Ablation,
    sample: &'a ProbeSample,
    lexicon: &Lexicon,
) -> (std::borrow::Cow<'a, VisualInput>, Option<AblationTrace>) {
    match ablation {
        Ablation::None => (std::borrow::Cow::Borrowed(&sample.image), None),
        Ablation::Subject => {
            let (img, trace) = ablate_subject(sample, lexicon);
            (std::borrow::Cow::Owned(img), Some(trace))
        }
        Ablation::Whole => (std::borrow::Cow::Owned(ablate_whole_image(&sample.image)), None),
    }
}
