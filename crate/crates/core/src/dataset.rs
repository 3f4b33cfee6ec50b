//! Probe samples and the two dataset loaders.
//!
//! SVO-style datasets are a TSV with the header
//! `image_id caption subject verb object pair_label foil_kind` (tab separated)
//! and one ROI file per image, `<roi_dir>/<image_id>.roi`.
//!
//! COCO-style datasets are a caption file (`image_id<TAB>caption`, one caption
//! per line, several lines per image allowed), an optional activity file
//! (`image_id<TAB>act1,act2,...`) and the same ROI directory layout.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::text::{find_verb_index, tokenize, Caption, Vocabulary};
use crate::visual::{load_roi_features, write_roi_features, VisualInput};

pub const SVO_HEADER: &str = "image_id\tcaption\tsubject\tverb\tobject\tpair_label\tfoil_kind";
pub const ROI_EXTENSION: &str = "roi";
/// Fraction of malformed rows above which a dataset is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoilKind {
    Subject,
    Verb,
    Object,
}

impl FromStr for PairLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "pos" | "1" => Ok(PairLabel::Positive),
            "negative" | "neg" | "0" => Ok(PairLabel::Negative),
            _ => Err(Error::Schema(format!("bad pair label {s:?}"))),
        }
    }
}

impl fmt::Display for PairLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairLabel::Positive => "positive",
            PairLabel::Negative => "negative",
        })
    }
}

impl FoilKind {
    fn parse(s: &str) -> Result<Option<Self>> {
        match s {
            "" | "none" | "-" => Ok(None),
            "subject" => Ok(Some(FoilKind::Subject)),
            "verb" => Ok(Some(FoilKind::Verb)),
            "object" => Ok(Some(FoilKind::Object)),
            _ => Err(Error::Schema(format!("bad foil kind {s:?}"))),
        }
    }

    fn as_str(kind: Option<FoilKind>) -> &'static str {
        match kind {
            None => "none",
            Some(FoilKind::Subject) => "subject",
            Some(FoilKind::Verb) => "verb",
            Some(FoilKind::Object) => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub id: String,
    pub image: VisualInput,
    pub caption: Caption,
    /// Word to probe; `None` when no target could be resolved, in which case
    /// the sample is counted as skipped by the probers.
    pub target_index: Option<usize>,
    pub subject_word: String,
    pub object_word: String,
    pub pair_label: PairLabel,
    pub foil_kind: Option<FoilKind>,
    /// Activity annotations attached to the image, if the dataset has any.
    pub activities: Vec<String>,
}

impl ProbeSample {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        if let Some(i) = self.target_index {
            if i >= self.caption.len() {
                return Err(Error::BadIndex {
                    index: i,
                    len: self.caption.len(),
                });
            }
        }
        if self.pair_label == PairLabel::Positive && self.foil_kind.is_some() {
            return Err(Error::Schema(format!("{}: positive pair with a foil", self.id)));
        }
        Ok(())
    }

    pub fn target_word(&self) -> Option<&str> {
        self.target_index.map(|i| self.caption.words[i].as_str())
    }
}

/// Samples plus bookkeeping about what the loader dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<ProbeSample>,
    pub rows: usize,
    pub malformed: usize,
    /// Captions without a resolvable verb (COCO loader only).
    pub no_verb: usize,
    /// Captions whose image had no ROI file (COCO loader only).
    pub unjoined: usize,
}

impl Dataset {
    pub fn positives(&self) -> impl Iterator<Item = &ProbeSample> {
        self.samples
            .iter()
            .filter(|s| s.pair_label == PairLabel::Positive)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn roi_path(roi_dir: &Path, image_id: &str) -> PathBuf {
    roi_dir.join(format!("{image_id}.{ROI_EXTENSION}"))
}

struct ImageCache<'a> {
    dir: &'a Path,
    images: HashMap<String, Option<VisualInput>>,
}

impl<'a> ImageCache<'a> {
    fn new(dir: &'a Path) -> Self {
        ImageCache {
            dir,
            images: HashMap::new(),
        }
    }

    /// `Ok(None)` when the file does not exist; schema errors propagate.
    fn get(&mut self, image_id: &str) -> Result<Option<VisualInput>> {
        if let Some(hit) = self.images.get(image_id) {
            return Ok(hit.clone());
        }
        let path = roi_path(self.dir, image_id);
        let loaded = if path.exists() {
            Some(load_roi_features(&path)?)
        } else {
            None
        };
        self.images.insert(image_id.to_string(), loaded.clone());
        Ok(loaded)
    }
}

fn check_malformed(path: &Path, malformed: usize, total: usize) -> Result<()> {
    if total > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::CorruptDataset {
            path: path.to_path_buf(),
            malformed,
            total,
        });
    }
    Ok(())
}

/// Loads an SVO-style TSV whose ROI files live in `rois/` next to it.
pub fn load_svo_dataset(path: impl AsRef<Path>, vocab: &Vocabulary, lexicon: &Lexicon) -> Result<Dataset> {
    let path = path.as_ref();
    let roi_dir = path.parent().unwrap_or(Path::new(".")).join("rois");
    load_svo_dataset_with_rois(path, &roi_dir, vocab, lexicon)
}

pub fn load_svo_dataset_with_rois(
    path: impl AsRef<Path>,
    roi_dir: impl AsRef<Path>,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != SVO_HEADER {
        return Err(Error::Schema(format!(
            "{}: header {header:?} does not match {SVO_HEADER:?}",
            path.display()
        )));
    }
    let mut images = ImageCache::new(roi_dir.as_ref());
    let mut data = Dataset::default();
    for (row, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        data.rows += 1;
        match svo_row(row, line, vocab, lexicon, &mut images) {
            Ok(sample) => data.samples.push(sample),
            Err(_) => data.malformed += 1,
        }
    }
    check_malformed(path, data.malformed, data.rows)?;
    Ok(data)
}

fn svo_row(
    row: usize,
    line: &str,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    images: &mut ImageCache,
) -> Result<ProbeSample> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return Err(Error::Schema(format!("row {row}: {} fields", f.len())));
    }
    let image = images
        .get(f[0])?
        .ok_or_else(|| Error::Schema(format!("row {row}: no ROI file for {}", f[0])))?;
    let caption = tokenize(f[1], vocab)?;
    let verb_lemma = lexicon.lemmatize(&f[3].to_lowercase());
    let target_index = caption
        .words
        .iter()
        .position(|w| lexicon.lemmatize(w) == verb_lemma)
        .or_else(|| find_verb_index(&caption, None, lexicon).ok());
    let sample = ProbeSample {
        id: format!("{}#{row}", f[0]),
        image,
        caption,
        target_index,
        subject_word: f[2].to_lowercase(),
        object_word: f[4].to_lowercase(),
        pair_label: f[5].parse()?,
        foil_kind: FoilKind::parse(f[6])?,
        activities: Vec::new(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes samples as an SVO-style TSV plus one ROI file per distinct image.
/// The verb column holds the target word.
pub fn write_svo_dataset(samples: &[ProbeSample], tsv: impl AsRef<Path>, roi_dir: impl AsRef<Path>) -> Result<()> {
    let (tsv, roi_dir) = (tsv.as_ref(), roi_dir.as_ref());
    std::fs::create_dir_all(roi_dir).map_err(|e| Error::io(roi_dir, e))?;
    let mut out = String::from(SVO_HEADER);
    out.push('\n');
    let mut written = std::collections::HashSet::new();
    for s in samples {
        let verb = s.target_word().unwrap_or("-");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.image.image_id,
            s.caption.raw,
            s.subject_word,
            verb,
            s.object_word,
            s.pair_label,
            FoilKind::as_str(s.foil_kind)
        ));
        if written.insert(s.image.image_id.clone()) {
            write_roi_features(&s.image, roi_path(roi_dir, &s.image.image_id))?;
        }
    }
    std::fs::write(tsv, out).map_err(|e| Error::io(tsv, e))
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "two", "three", "one", "his",
    "her", "their", "its", "of", "with", "and", "on", "in", "at", "is", "are", "to", "very",
    "young", "old", "older", "little", "small", "big", "large",
];

/// Subject heuristic: the closest non-stopword left of the verb.
fn guess_subject(caption: &Caption, verb: usize) -> String {
    caption.words[..verb]
        .iter()
        .rev()
        .find(|w| !STOPWORDS.contains(&w.as_str()))
        .cloned()
        .unwrap_or_else(|| "person".to_string())
}

/// Joins MS-COCO-style captions to ROI files. The probed verb is the first
/// heuristic verb in each caption; verbless and unjoinable captions are
/// dropped and counted.
pub fn load_coco_captions(
    caption_path: impl AsRef<Path>,
    activity_path: Option<&Path>,
    roi_dir: impl AsRef<Path>,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
) -> Result<Dataset> {
    let caption_path = caption_path.as_ref();
    let mut activities: HashMap<String, Vec<String>> = HashMap::new();
    if let Some(p) = activity_path {
        for line in read(p)?.lines() {
            if let Some((id, acts)) = line.trim_end_matches('\r').split_once('\t') {
                activities.insert(
                    id.to_string(),
                    acts.split(',')
                        .map(|a| a.trim().to_lowercase())
                        .filter(|a| !a.is_empty())
                        .collect(),
                );
            }
        }
    }

    let mut images = ImageCache::new(roi_dir.as_ref());
    let mut data = Dataset::default();
    for (row, line) in read(caption_path)?.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (row == 0 && line == "image_id\tcaption") {
            continue;
        }
        data.rows += 1;
        let Some((image_id, raw)) = line.split_once('\t') else {
            data.malformed += 1;
            continue;
        };
        let Ok(caption) = tokenize(raw, vocab) else {
            data.malformed += 1;
            continue;
        };
        let image = match images.get(image_id) {
            Ok(Some(img)) => img,
            Ok(None) => {
                data.unjoined += 1;
                continue;
            }
            Err(_) => {
                data.malformed += 1;
                continue;
            }
        };
        let Ok(verb) = find_verb_index(&caption, None, lexicon) else {
            data.no_verb += 1;
            continue;
        };
        data.samples.push(ProbeSample {
            id: format!("{image_id}#{row}"),
            subject_word: guess_subject(&caption, verb),
            object_word: String::new(),
            image,
            caption,
            target_index: Some(verb),
            pair_label: PairLabel::Positive,
            foil_kind: None,
            activities: activities.get(image_id).cloned().unwrap_or_default(),
        });
    }
    check_malformed(caption_path, data.malformed, data.rows)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::{format_roi_features, BBox, RoiFeature};

    fn image(id: &str) -> VisualInput {
        VisualInput::new(
            id,
            vec![RoiFeature {
                bbox: BBox::new(0.1, 0.1, 0.6, 0.9).unwrap(),
                feature: vec![0.5, -0.25],
                label: "person".into(),
                score: 0.9,
            }],
        )
        .unwrap()
    }

    fn setup(rows: &[&str], ids: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("rois")).unwrap();
        for id in ids {
            std::fs::write(
                dir.path().join("rois").join(format!("{id}.roi")),
                format_roi_features(&image(id)),
            )
            .unwrap();
        }
        let mut text = format!("{SVO_HEADER}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(dir.path().join("svo.tsv"), text).unwrap();
        dir
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "girl", "sitting", "on", "grass", "sits"])
    }

    #[test]
    fn loads_svo_rows() {
        let dir = setup(
            &[
                "i1\tA girl sitting on grass.\tgirl\tsit\tgrass\tpositive\tnone",
                "i1\tA girl sits on grass.\tgirl\tsit\tgrass\tnegative\tverb",
            ],
            &["i1"],
        );
        let lex = Lexicon::english();
        let d = load_svo_dataset(dir.path().join("svo.tsv"), &vocab(), &lex).unwrap();
        assert_eq!(d.samples.len(), 2);
        assert_eq!(d.malformed, 0);
        assert_eq!(d.samples[0].target_index, Some(2));
        assert_eq!(d.samples[0].subject_word, "girl");
        assert_eq!(d.samples[1].foil_kind, Some(FoilKind::Verb));
        assert_eq!(d.positives().count(), 1);
        // deterministic
        let again = load_svo_dataset(dir.path().join("svo.tsv"), &vocab(), &lex).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn malformed_rows_are_counted_then_fatal() {
        let mut rows = vec!["i1\tA girl sitting on grass.\tgirl\tsit\tgrass\tpositive\tnone"; 10];
        rows.push("i1\tbroken row");
        let dir = setup(&rows, &["i1"]);
        let lex = Lexicon::english();
        let d = load_svo_dataset(dir.path().join("svo.tsv"), &vocab(), &lex).unwrap();
        assert_eq!((d.samples.len(), d.malformed, d.rows), (10, 1, 11));

        rows.push("missing\tA girl sitting.\tgirl\tsit\tgrass\tpositive\tnone");
        rows.push("i1\tA girl sitting.\tgirl\tsit\tgrass\tpositive\tverb");
        let dir = setup(&rows, &["i1"]);
        let err = load_svo_dataset(dir.path().join("svo.tsv"), &vocab(), &lex).unwrap_err();
        assert!(matches!(err, Error::CorruptDataset { malformed: 3, total: 13, .. }));
    }

    #[test]
    fn missing_file_and_bad_header() {
        let lex = Lexicon::english();
        let err = load_svo_dataset("/nonexistent/svo.tsv", &vocab(), &lex).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("svo.tsv"), "a\tb\n").unwrap();
        let err = load_svo_dataset(dir.path().join("svo.tsv"), &vocab(), &lex).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn svo_write_then_load() {
        let dir = setup(&["i1\tA girl sitting on grass.\tgirl\tsit\tgrass\tpositive\tnone"], &["i1"]);
        let lex = Lexicon::english();
        let d = load_svo_dataset(dir.path().join("svo.tsv"), &vocab(), &lex).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_svo_dataset(&d.samples, out.path().join("svo.tsv"), out.path().join("rois")).unwrap();
        let back = load_svo_dataset(out.path().join("svo.tsv"), &vocab(), &lex).unwrap();
        assert_eq!(back.samples, d.samples);
    }

    #[test]
    fn coco_join() {
        let dir = tempfile::tempdir().unwrap();
        let rois = dir.path().join("rois");
        std::fs::create_dir(&rois).unwrap();
        std::fs::write(rois.join("c1.roi"), format_roi_features(&image("c1"))).unwrap();
        std::fs::write(
            dir.path().join("caps.tsv"),
            "image_id\tcaption\n\
             c1\tA man walks with his surfboard on the sand.\n\
             c1\tA man and his surfboard.\n\
             c2\tA dog running.\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("acts.tsv"), "c1\thold,stand,walk\n").unwrap();
        let lex = Lexicon::english();
        let v = Vocabulary::new(["a", "man", "walks"]);
        let d = load_coco_captions(
            dir.path().join("caps.tsv"),
            Some(&dir.path().join("acts.tsv")),
            &rois,
            &v,
            &lex,
        )
        .unwrap();
        assert_eq!(d.samples.len(), 1);
        assert_eq!((d.no_verb, d.unjoined), (1, 1));
        let s = &d.samples[0];
        assert_eq!(s.target_word(), Some("walks"));
        assert_eq!(s.subject_word, "man");
        assert_eq!(s.activities, ["hold", "stand", "walk"]);
    }
}
