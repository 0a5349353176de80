//! Spectrum ingestion, preprocessing, partitioning and batch sampling.

mod batches;
mod manifest;
mod parse;
mod preprocess;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batches::{sample_pair_batch, sample_triplet_batch, ClassIndex, PairBatch, TripletBatch};
pub use manifest::{load_dataset, read_manifest, write_manifest, ManifestRecord};
pub use parse::parse_spectrum_file;
pub use preprocess::{augment, normalize, resample, AugmentPolicy, Grid};
pub use split::{make_splits, split_sizes, SplitPlan, MAX_REPLICATE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed spectrum file at line {line}: {reason}")]
    MalformedFile { line: usize, reason: String },
    #[error("non-finite value at line {line}")]
    NonFiniteValue { line: usize },
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("insufficient classes: need at least {needed}, found {found}")]
    InsufficientClasses { needed: usize, found: usize },
    #[error("replicate index {0} outside 0..={MAX_REPLICATE}")]
    InvalidReplicate(usize),
    #[error("not enough classes with both modalities to sample from (found {0})")]
    NotEnoughClasses(usize),
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The two sensing channels. `M1` plays the Raman role, `M2` the infrared role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::M1, Modality::M2];

    pub fn other(self) -> Modality {
        match self {
            Modality::M1 => Modality::M2,
            Modality::M2 => Modality::M1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::M1 => 0,
            Modality::M2 => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::M1 => "M1",
            Modality::M2 => "M2",
        })
    }
}

impl FromStr for Modality {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m1" | "raman" => Ok(Modality::M1),
            "m2" | "ir" | "infrared" => Ok(Modality::M2),
            other => Err(DataError::Manifest(format!("unknown modality {other:?}"))),
        }
    }
}

/// A spectrum as read from disk, before resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpectrum {
    pub positions: Vec<f64>,
    pub intensities: Vec<f64>,
    pub modality: Modality,
    pub class_id: u32,
    pub source_id: String,
}

impl RawSpectrum {
    pub fn new(
        positions: Vec<f64>,
        intensities: Vec<f64>,
        modality: Modality,
        class_id: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        if positions.len() != intensities.len() {
            return Err(DataError::InvalidSpectrum(format!(
                "{} positions but {} intensities",
                positions.len(),
                intensities.len()
            )));
        }
        if positions.len() < 2 {
            return Err(DataError::InvalidSpectrum("fewer than 2 points".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::InvalidSpectrum(
                "positions are not strictly ascending".into(),
            ));
        }
        Ok(Self { positions, intensities, modality, class_id, source_id: source_id.into() })
    }
}

/// A fixed-length spectrum on the common grid. All matching operates on these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub modality: Modality,
    pub class_id: u32,
    pub source_id: String,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks the post-normalization invariants: expected length, finite, inside `[0, 1]`.
    pub fn validate(&self, length: usize) -> Result<(), DataError> {
        if self.values.len() != length {
            return Err(DataError::InvalidSpectrum(format!(
                "{}: length {} != {length}",
                self.source_id,
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(DataError::InvalidSpectrum(format!(
                "{}: value {v} outside [0, 1]",
                self.source_id
            )));
        }
        Ok(())
    }
}

/// Class ids that have at least one spectrum of each modality.
pub fn paired_class_ids(spectra: &[Spectrum]) -> Vec<u32> {
    let mut seen: BTreeMap<u32, [bool; 2]> = BTreeMap::new();
    for s in spectra {
        seen.entry(s.class_id).or_default()[s.modality.index()] = true;
    }
    seen.into_iter().filter(|(_, m)| m[0] && m[1]).map(|(c, _)| c).collect()
}

/// Spectra whose class is in `classes` (which must be sorted).
pub fn select_classes(spectra: &[Spectrum], classes: &[u32]) -> Vec<Spectrum> {
    spectra
        .iter()
        .filter(|s| classes.binary_search(&s.class_id).is_ok())
        .cloned()
        .collect()
}
