//! Dataset manifests.
//!
//! A manifest is a CSV file with the header `path,modality,class_id`, one row
//! per spectrum file. `path` is relative to the manifest's directory,
//! `modality` is `M1`/`M2` (aliases `raman`, `ir`, `infrared`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize, parse_spectrum_file, resample, DataError, Grid, Modality, Spectrum};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub modality: Modality,
    pub class_id: u32,
}

#[derive(Deserialize)]
struct RawRecord {
    path: String,
    modality: String,
    class_id: u32,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<RawRecord>() {
        let row = row.map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        out.push(ManifestRecord { modality: row.modality.parse()?, path: row.path, class_id: row.class_id });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| DataError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Reads every file listed in the manifest, resamples it onto `grid` and normalizes it.
pub fn load_dataset(manifest: &Path, grid: &Grid) -> Result<Vec<Spectrum>, DataError> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let file = base.join(&r.path);
            let text = fs::read_to_string(&file)
                .map_err(|source| DataError::Io { path: file.display().to_string(), source })?;
            let raw = parse_spectrum_file(&text, r.modality, r.class_id, &r.path)?;
            Ok(normalize(&resample(&raw, grid)?))
        })
        .collect()
}
