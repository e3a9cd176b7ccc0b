//! Training cases on disk and the per-sample pipeline that turns them into
//! network-ready tensors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use edgeseg_tensor::Tensor;

use crate::augment::{augment_sample, AugmentConfig};
use crate::edge::{EdgeExtractor, EdgeMapSet};
use crate::volume_io::{normalize_intensity, read_metaimage, resample, Volume, VolumeKind};
use crate::{Error, Result, Scalar};

/// Suffix that marks a label file next to its image (`Case00.mhd` and
/// `Case00_segmentation.mhd`).
pub const LABEL_SUFFIX: &str = "_segmentation";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    ZScore,
    None,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Normalization::ZScore),
            "none" => Ok(Normalization::None),
            other => Err(Error::Config(format!("unknown normalization {other:?} (expected zscore or none)"))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::ZScore => "zscore",
            Normalization::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub spacing: [f64; 3],
    pub normalization: Normalization,
}

impl Preprocess {
    pub fn image<T: Scalar>(&self, image: &Volume<T>) -> Result<Volume<T>> {
        let v = resample(image, self.spacing)?;
        match self.normalization {
            Normalization::ZScore => normalize_intensity(&v),
            Normalization::None => Ok(v),
        }
    }

    pub fn label<T: Scalar>(&self, label: &Volume<T>) -> Result<Volume<T>> {
        resample(label, self.spacing)
    }
}

#[derive(Clone, Debug)]
pub struct Case<T> {
    pub id: String,
    pub image: Volume<T>,
    pub label: Volume<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    cases: Vec<Case<T>>,
}

/// Image files in `dir` that have a matching label file, sorted by case id.
pub fn list_cases(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if path.extension().and_then(|e| e.to_str()) != Some("mhd") || stem.ends_with(LABEL_SUFFIX) {
            continue;
        }
        let label = path.with_file_name(format!("{stem}{LABEL_SUFFIX}.mhd"));
        if label.is_file() {
            out.push((stem.to_string(), path.clone(), label));
        }
    }
    out.sort();
    Ok(out)
}

impl<T: Scalar> Dataset<T> {
    pub fn from_cases(cases: Vec<Case<T>>) -> Result<Self> {
        for c in &cases {
            if c.image.dims() != c.label.dims() {
                return Err(Error::Contract(format!("case {}: image and label shapes differ", c.id)));
            }
        }
        Ok(Dataset { cases })
    }

    /// Loads every image/label pair in `dir` and preprocesses it.
    pub fn load_dir(dir: &Path, pre: &Preprocess) -> Result<Self> {
        let mut cases = Vec::new();
        for (id, image, label) in list_cases(dir)? {
            let image = read_metaimage::<T>(&image, VolumeKind::Image)?;
            let label = read_metaimage::<T>(&label, VolumeKind::Label)?;
            cases.push(Case { id, image: pre.image(&image)?, label: pre.label(&label)? });
        }
        if cases.is_empty() {
            return Err(Error::Config(format!("no image/label pairs found in {}", dir.display())));
        }
        Self::from_cases(cases)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[Case<T>] {
        &self.cases
    }

    /// Splits off the last `n` cases (by id order) as a held-out set.
    pub fn split_last(mut self, n: usize) -> (Self, Self) {
        let keep = self.cases.len().saturating_sub(n);
        let held = self.cases.split_off(keep);
        (self, Dataset { cases: held })
    }
}

/// One training example: `[1, 1, x, y, z]` image and label plus edge targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: Tensor<T>,
    pub edges: [Tensor<T>; 3],
}

pub fn make_sample<T: Scalar>(
    case: &Case<T>,
    augment: &AugmentConfig,
    extractor: EdgeExtractor,
    seed: u64,
) -> Result<Sample<T>> {
    let patch = augment_sample(&case.image, &case.label, augment, seed)?;
    let edges = EdgeMapSet::from_mask(&patch.label, extractor)?;
    let [e0, e1, e2] = &edges.maps;
    Ok(Sample {
        image: patch.image.to_tensor(),
        label: patch.label.to_tensor(),
        edges: [e0.to_tensor(), e1.to_tensor(), e2.to_tensor()],
    })
}
