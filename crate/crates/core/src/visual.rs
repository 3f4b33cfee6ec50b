//! Region-of-interest features and their text file format.
//!
//! A ROI file starts with `d_v n_rois` and holds one region per line:
//! `x1 y1 x2 y2 score label f_1 ... f_{d_v}`, space separated.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f32| (0.0..=1.0).contains(&v);
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|&v| in_unit(v)) {
            return Err(Error::Schema(format!("bbox {self:?} outside [0,1]")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Schema(format!("bbox {self:?} has no area")));
        }
        Ok(())
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when the two boxes share a region of positive area. Boxes that
    /// only touch along an edge or at a corner do not intersect.
    pub fn intersects(&self, other: &BBox) -> bool {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w > 0.0 && h > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub bbox: BBox,
    pub feature: Vec<f32>,
    pub label: String,
    pub score: f32,
}

/// Detected regions of one image, in detector order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualInput {
    pub image_id: String,
    pub rois: Vec<RoiFeature>,
}

impl VisualInput {
    pub fn new(image_id: impl Into<String>, rois: Vec<RoiFeature>) -> Result<Self> {
        let v = VisualInput {
            image_id: image_id.into(),
            rois,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .rois
            .first()
            .ok_or_else(|| Error::Schema(format!("image {} has no regions", self.image_id)))?;
        let dim = first.feature.len();
        for (i, roi) in self.rois.iter().enumerate() {
            roi.bbox.validate()?;
            if roi.feature.len() != dim {
                return Err(Error::Schema(format!(
                    "image {}: region {i} has {} features, expected {dim}",
                    self.image_id,
                    roi.feature.len()
                )));
            }
            if !(0.0..=1.0).contains(&roi.score) {
                return Err(Error::Schema(format!(
                    "image {}: region {i} score {} outside [0,1]",
                    self.image_id, roi.score
                )));
            }
            if roi.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "image {}: region {i} has non-finite features",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.rois.first().map_or(0, |r| r.feature.len())
    }

    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn labels(&self) -> Vec<(&str, f32)> {
        self.rois.iter().map(|r| (r.label.as_str(), r.score)).collect()
    }

    /// A single full-frame region with all-zero features, used where a model
    /// needs at least one visual token but no visual evidence should flow.
    pub fn blank(image_id: impl Into<String>, feature_dim: usize) -> Self {
        VisualInput {
            image_id: image_id.into(),
            rois: vec![RoiFeature {
                bbox: BBox {
                    x1: 0.0,
                    y1: 0.0,
                    x2: 1.0,
                    y2: 1.0,
                },
                feature: vec![0.0; feature_dim],
                label: "image".into(),
                score: 1.0,
            }],
        }
    }
}

pub fn parse_roi_features(image_id: &str, text: &str) -> Result<VisualInput> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{image_id}: empty ROI file")))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Schema(format!("{image_id}: bad header {header:?}")))
    };
    if head.len() != 2 {
        return Err(Error::Schema(format!("{image_id}: bad header {header:?}")));
    }
    let (dim, n) = (parse_usize(head[0])?, parse_usize(head[1])?);

    let mut rois = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 + dim {
            return Err(Error::Schema(format!(
                "{image_id}: region {i} has {} fields, expected {}",
                f.len(),
                6 + dim
            )));
        }
        let num = |s: &str| {
            s.parse::<f32>()
                .map_err(|_| Error::Schema(format!("{image_id}: region {i}: bad number {s:?}")))
        };
        let bbox = BBox {
            x1: num(f[0])?,
            y1: num(f[1])?,
            x2: num(f[2])?,
            y2: num(f[3])?,
        };
        let score = num(f[4])?;
        let feature = f[6..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        rois.push(RoiFeature {
            bbox,
            feature,
            label: f[5].to_string(),
            score,
        });
    }
    if rois.len() != n {
        return Err(Error::Schema(format!(
            "{image_id}: header promises {n} regions, found {}",
            rois.len()
        )));
    }
    VisualInput::new(image_id, rois)
}

/// Reads a ROI file; the image id is the file stem.
pub fn load_roi_features(path: impl AsRef<Path>) -> Result<VisualInput> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_roi_features(&id, &text)
}

/// Serializes with shortest round-trip float formatting, so parsing the output
/// reproduces every value bit for bit.
pub fn format_roi_features(image: &VisualInput) -> String {
    let mut out = format!("{} {}\n", image.feature_dim(), image.len());
    for roi in &image.rois {
        let b = roi.bbox;
        let _ = write!(out, "{} {} {} {} {} {}", b.x1, b.y1, b.x2, b.y2, roi.score, roi.label);
        for v in &roi.feature {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_roi_features(image: &VisualInput, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_roi_features(image)).map_err(|e| Error::io(path, e))
}
