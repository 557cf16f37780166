//! Shared domain types: the lesion vocabulary, images, mask/probability
//! stacks, presence vectors, DR grades and dataset records, plus the
//! pixel-to-image label propagation rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Canonical lesion order. Serialization, mask filenames and channel layout
/// all follow this order.
pub const LESION_NAMES: [&str; 8] = ["MA", "iHE", "HaEx", "CWS", "vHE", "pHE", "NV", "FiP"];

pub const MA: usize = 0;
pub const IHE: usize = 1;
pub const HAEX: usize = 2;
pub const CWS: usize = 3;
pub const VHE: usize = 4;
pub const PHE: usize = 5;
pub const NV: usize = 6;
pub const FIP: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionVocabulary {
    lesions: Vec<String>,
}

impl Default for LesionVocabulary {
    fn default() -> Self {
        LesionVocabulary {
            lesions: LESION_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LesionVocabulary {
    /// Non-default vocabularies are only meant for tests.
    pub fn custom(lesions: Vec<String>) -> Self {
        LesionVocabulary { lesions }
    }

    pub fn m(&self) -> usize {
        self.lesions.len()
    }

    pub fn names(&self) -> &[String] {
        &self.lesions
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lesions.iter().position(|l| l == name)
    }
}

/// Square RGB fundus image, values in [0,1], side divisible by 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusImage {
    pub pixels: Tensor,
}

impl FundusImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.c != 3 {
            return Err(Error::Shape(format!(
                "fundus image must have 3 channels, got {}",
                pixels.c
            )));
        }
        if pixels.h != pixels.w {
            return Err(Error::Shape(format!(
                "fundus image must be square, got {}x{}",
                pixels.h, pixels.w
            )));
        }
        if pixels.h % 32 != 0 {
            return Err(Error::Shape(format!(
                "image side {} not divisible by 32",
                pixels.h
            )));
        }
        if !pixels.data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput("image values outside [0,1]".into()));
        }
        Ok(FundusImage { pixels })
    }

    pub fn side(&self) -> usize {
        self.pixels.h
    }
}

/// Per-pixel multi-label ground truth over the lesion channels. Values are
/// stored as 0.0 / 1.0; channels may overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionMaskStack {
    pub masks: Tensor,
}

impl LesionMaskStack {
    pub fn new(masks: Tensor) -> Result<Self> {
        if !masks.data.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::InvalidInput("mask values must be binary".into()));
        }
        Ok(LesionMaskStack { masks })
    }

    pub fn zeros(side: usize, m: usize) -> Self {
        LesionMaskStack {
            masks: Tensor::zeros(side, side, m),
        }
    }

    pub fn m(&self) -> usize {
        self.masks.c
    }
}

/// Probabilistic segmentation maps in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMapStack {
    pub maps: Tensor,
}

impl ProbMapStack {
    pub fn new(maps: Tensor) -> Result<Self> {
        if !maps.data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "probability values outside [0,1]".into(),
            ));
        }
        Ok(ProbMapStack { maps })
    }

    pub fn m(&self) -> usize {
        self.maps.c
    }
}

/// Image-level lesion labels: per-channel maxima of a map stack
/// (predictions), or binary presence flags (ground truth).
#[derive(Clone, Debug, PartialEq)]
pub struct LesionPresenceVector {
    pub values: Vec<f64>,
}

impl LesionPresenceVector {
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DRGrade(u8);

impl DRGrade {
    pub fn new(grade: u8) -> Result<Self> {
        if grade > 4 {
            return Err(Error::InvalidInput(format!("grade {grade} out of range")));
        }
        Ok(DRGrade(grade))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for DRGrade {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        DRGrade::new(v)
    }
}

impl From<DRGrade> for u8 {
    fn from(g: DRGrade) -> u8 {
        g.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line: an image with its annotations (or a rasterized mask
/// directory), a DR grade and a split tag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<crate::ingest::Annotation>>,
    pub grade: u8,
    pub split: Split,
}

/// Image-level lesion probabilities by global max pooling: P_j = max_i p_{i,j}.
pub fn presence_from_maps(maps: &ProbMapStack) -> Result<LesionPresenceVector> {
    let t = &maps.maps;
    if t.h == 0 || t.w == 0 {
        return Err(Error::InvalidInput("empty spatial extent".into()));
    }
    let mut values = vec![f64::NEG_INFINITY; t.c];
    for px in t.data.chunks_exact(t.c) {
        for (v, &p) in values.iter_mut().zip(px) {
            if p > *v {
                *v = p;
            }
        }
    }
    Ok(LesionPresenceVector { values })
}

/// Binarize maps at `tau` (inclusive: output 1 iff value >= tau).
pub fn threshold_maps(maps: &ProbMapStack, tau: f64) -> Result<LesionMaskStack> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} outside (0,1)")));
    }
    Ok(LesionMaskStack {
        masks: maps.maps.map(|v| if v >= tau { 1.0 } else { 0.0 }),
    })
}

/// Report-based record validation; an empty report means valid.
pub fn validate_record(record: &DatasetRecord, vocab: &LesionVocabulary) -> Vec<String> {
    let mut report = Vec::new();
    if record.grade > 4 {
        report.push(format!(
            "grade out of range: {} (image {})",
            record.grade, record.image_id
        ));
    }
    if !record.image.exists() {
        report.push(format!("missing file: {}", record.image.display()));
    }
    if record.masks_dir.is_none() && record.annotations.is_none() {
        report.push(format!(
            "record {} has neither masks_dir nor annotations",
            record.image_id
        ));
    }
    if let Some(dir) = &record.masks_dir {
        if !dir.exists() {
            report.push(format!("missing file: {}", dir.display()));
        }
    }
    if let Some(anns) = &record.annotations {
        for ann in anns {
            if vocab.index_of(&ann.lesion).is_none() {
                report.push(format!("unknown lesion: {}", ann.lesion));
            }
            if let Err(e) = ann.validate() {
                report.push(format!("malformed annotation ({}): {e}", ann.lesion));
            }
        }
    }
    report
}
