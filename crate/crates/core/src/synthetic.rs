//! Synthetic grounded corpus: captions `<subject> <verb> <object>` whose verb
//! can only be read off the subject region.
//!
//! Each subject owns a fixed set of verbs. Samples are emitted in blocks, one
//! block per (subject, object) pair containing every verb of the subject
//! exactly once, so the verb given the rest of the caption is exactly uniform.
//! The subject region's pose channels hold a fixed code for the verb; its
//! other channels identify the subject. The object region identifies the
//! object, and distractor regions are noise. Boxes and region order are drawn
//! independently of the verb.
//!
//! `seed` fixes the world (verb sets and codes); `instance_seed` fixes the
//! samples drawn from it, so a held-out split shares the world of its training
//! split.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FoilKind, PairLabel, ProbeSample};
use crate::error::{Error, Result};
use crate::lexicon::activity_verbs;
use crate::text::{caption_from_words, Vocabulary};
use crate::visual::{BBox, RoiFeature, VisualInput};

pub const SUBJECTS: [&str; 16] = [
    "man", "woman", "girl", "boy", "child", "baby", "chef", "farmer", "player", "skater", "surfer", "swimmer",
    "dancer", "singer", "rider", "dog",
];

pub const OBJECTS: [&str; 24] = [
    "ball", "kite", "surfboard", "skateboard", "frisbee", "cup", "bottle", "bowl", "bag", "box", "car", "bicycle",
    "boat", "guitar", "racket", "piano", "chair", "table", "book", "phone", "pizza", "sandwich", "apple", "bread",
];

pub const DISTRACTORS: [&str; 16] = [
    "tree", "sky", "cloud", "grass", "wall", "fence", "window", "door", "sign", "pole", "bench", "bush", "flower",
    "rock", "water", "street",
];

/// Standard deviation of the noise on identity and distractor channels.
const NOISE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_subjects: usize,
    pub n_verbs_per_subject: usize,
    pub n_objects: usize,
    pub n_distractor_rois: usize,
    pub d_v: usize,
    /// Channels of the subject region that carry the verb code.
    pub pose_channels: Range<usize>,
    pub n_samples: usize,
    pub seed: u64,
    pub instance_seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            n_subjects: 16,
            n_verbs_per_subject: 8,
            n_objects: 24,
            n_distractor_rois: 3,
            d_v: 32,
            pose_channels: 0..16,
            n_samples: 5000,
            seed: 0,
            instance_seed: 1,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.n_subjects > SUBJECTS.len() {
            return fail(format!("n_subjects must be in 1..={}", SUBJECTS.len()));
        }
        if self.n_objects == 0 || self.n_objects > OBJECTS.len() {
            return fail(format!("n_objects must be in 1..={}", OBJECTS.len()));
        }
        let n_verbs = activity_verbs().len();
        if self.n_verbs_per_subject < 8 || self.n_verbs_per_subject > n_verbs {
            return fail(format!("n_verbs_per_subject must be in 8..={n_verbs}"));
        }
        if self.pose_channels.is_empty() || self.pose_channels.end >= self.d_v {
            return fail(format!(
                "pose channels {:?} must be nonempty and leave identity channels within d_v = {}",
                self.pose_channels, self.d_v
            ));
        }
        if self.n_samples == 0 || !self.n_samples.is_multiple_of(self.n_verbs_per_subject) {
            return fail(format!(
                "n_samples {} must be a positive multiple of n_verbs_per_subject {}",
                self.n_samples, self.n_verbs_per_subject
            ));
        }
        Ok(())
    }

    fn identity_channels(&self) -> Vec<usize> {
        (0..self.d_v).filter(|c| !self.pose_channels.contains(c)).collect()
    }
}

/// The fixed part of a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub subjects: Vec<String>,
    pub objects: Vec<String>,
    /// Gerund forms available to each subject.
    pub verb_sets: BTreeMap<String, Vec<String>>,
    /// Pose code per verb (gerund), length `pose_channels.len()`.
    pub verb_codes: BTreeMap<String, Vec<f32>>,
    /// Identity code per subject or object word, over the non-pose channels.
    pub identity_codes: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub world: SyntheticWorld,
    pub vocab: Vocabulary,
    pub samples: Vec<ProbeSample>,
}

/// Every word the generator can emit, every inflection of the activity verbs,
/// and the distractor labels.
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut words: Vec<String> = SUBJECTS.iter().chain(&OBJECTS).map(|s| s.to_string()).collect();
    for v in activity_verbs() {
        words.extend(v.all().iter().map(|s| s.to_string()));
    }
    words.extend(DISTRACTORS.iter().map(|s| s.to_string()));
    Vocabulary::new(words)
}

fn unit_code(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scale = (len as f64).sqrt() / norm;
    v.into_iter().map(|x| (x * scale) as f32).collect()
}

pub fn build_world(spec: &SyntheticCorpusSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subjects: Vec<String> = SUBJECTS[..spec.n_subjects].iter().map(|s| s.to_string()).collect();
    let objects: Vec<String> = OBJECTS[..spec.n_objects].iter().map(|s| s.to_string()).collect();
    let gerunds: Vec<String> = activity_verbs().into_iter().map(|v| v.gerund).collect();
    let mut verb_sets = BTreeMap::new();
    for s in &subjects {
        let mut set: Vec<String> = gerunds
            .choose_multiple(&mut rng, spec.n_verbs_per_subject)
            .cloned()
            .collect();
        set.sort();
        verb_sets.insert(s.clone(), set);
    }
    let pose_len = spec.pose_channels.len();
    let verb_codes = gerunds.iter().map(|g| (g.clone(), unit_code(&mut rng, pose_len))).collect();
    let id_len = spec.identity_channels().len();
    let identity_codes = subjects
        .iter()
        .chain(&objects)
        .map(|w| (w.clone(), unit_code(&mut rng, id_len)))
        .collect();
    Ok(SyntheticWorld {
        subjects,
        objects,
        verb_sets,
        verb_codes,
        identity_codes,
    })
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w: f32 = rng.random_range(0.15..0.6);
    let h: f32 = rng.random_range(0.15..0.6);
    let x1: f32 = rng.random_range(0.0..1.0 - w);
    let y1: f32 = rng.random_range(0.0..1.0 - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

fn noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, NOISE).expect("positive std");
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    let world = build_world(spec)?;
    let vocab = synthetic_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.instance_seed ^ 0x005e_ed0f_1a7a);
    let mut pairs: Vec<(usize, usize)> = (0..world.subjects.len())
        .flat_map(|s| (0..world.objects.len()).map(move |o| (s, o)))
        .collect();
    pairs.shuffle(&mut rng);
    let id_channels = spec.identity_channels();
    let n_blocks = spec.n_samples / spec.n_verbs_per_subject;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for b in 0..n_blocks {
        let (si, oi) = pairs[b % pairs.len()];
        let subject = &world.subjects[si];
        let object = &world.objects[oi];
        for verb in &world.verb_sets[subject] {
            let idx = samples.len();
            let mut subject_feature = noise(&mut rng, spec.d_v);
            for c in spec.pose_channels.clone() {
                subject_feature[c] = 0.0;
            }
            for (c, &v) in spec.pose_channels.clone().zip(&world.verb_codes[verb]) {
                subject_feature[c] = v;
            }
            for (&c, &v) in id_channels.iter().zip(&world.identity_codes[subject]) {
                subject_feature[c] += v;
            }
            let mut object_feature = noise(&mut rng, spec.d_v);
            for (&c, &v) in id_channels.iter().zip(&world.identity_codes[object]) {
                object_feature[c] += v;
            }
            let mut rois = vec![
                RoiFeature {
                    bbox: random_box(&mut rng),
                    feature: subject_feature,
                    label: subject.clone(),
                    score: rng.random_range(0.6..1.0),
                },
                RoiFeature {
                    bbox: random_box(&mut rng),
                    feature: object_feature,
                    label: object.clone(),
                    score: rng.random_range(0.6..1.0),
                },
            ];
            for _ in 0..spec.n_distractor_rois {
                rois.push(RoiFeature {
                    bbox: random_box(&mut rng),
                    feature: noise(&mut rng, spec.d_v),
                    label: DISTRACTORS.choose(&mut rng).expect("nonempty").to_string(),
                    score: rng.random_range(0.3..1.0),
                });
            }
            rois.shuffle(&mut rng);
            let id = format!("syn{}-{idx:06}", spec.instance_seed);
            let caption = caption_from_words(&[subject.as_str(), verb.as_str(), object.as_str()], &vocab)?;
            samples.push(ProbeSample {
                id: id.clone(),
                image: VisualInput::new(id, rois)?,
                caption,
                target_index: Some(1),
                subject_word: subject.clone(),
                object_word: object.clone(),
                pair_label: PairLabel::Positive,
                foil_kind: None,
                activities: vec![verb.clone()],
            });
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        world,
        vocab,
        samples,
    })
}

/// Adds one verb-swapped negative after every positive, giving a balanced
/// image-text matching set. The replacement verb is another verb of the same
/// subject, so only the image can tell the pair apart.
pub fn make_itm_set(corpus: &SyntheticCorpus, seed: u64) -> Result<Vec<ProbeSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.samples.len() * 2);
    for s in &corpus.samples {
        out.push(s.clone());
        let verb = s.target_word().ok_or_else(|| Error::NoTargetWord(s.caption.raw.clone()))?;
        let others: Vec<&String> = corpus.world.verb_sets[&s.subject_word]
            .iter()
            .filter(|v| *v != verb)
            .collect();
        let swap = others.choose(&mut rng).expect("at least 8 verbs per subject");
        let mut words = s.caption.words.clone();
        words[1] = (*swap).clone();
        let mut neg = s.clone();
        neg.id = format!("{}-neg", s.id);
        neg.caption = caption_from_words(&words, &corpus.vocab)?;
        neg.pair_label = PairLabel::Negative;
        neg.foil_kind = Some(FoilKind::Verb);
        out.push(neg);
    }
    Ok(out)
}
