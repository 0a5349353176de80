//! Cross-modality retrieval metrics, occlusion robustness and the
//! within-modality matching baseline.

mod export;
mod metrics;
mod occlusion;

use std::collections::HashSet;

use thiserror::Error;

use crate::data::{Modality, Spectrum};
use crate::model::{InferenceParams, ModelParams};

pub use export::{write_curves_csv, write_json, write_metrics_csv};
pub use metrics::{
    evaluate, evaluate_table, map_at_k, rank, recall_at_k, Direction, MetricsReport, DEFAULT_KS,
};
pub use occlusion::{mask_spectrum, occlusion_test, within_modality_baseline, OcclusionConfig, OcclusionCurve};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty gallery")]
    EmptyGallery,
    #[error("no queries for {0}")]
    NoQueries(String),
    #[error("mask window of {len} points at {position} does not fit length {length}")]
    InvalidWindow { len: usize, position: usize, length: usize },
    #[error("invalid mask ratio {0}")]
    InvalidRatio(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate source id {0}")]
    DuplicateSource(String),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Maps spectra of a given modality to embedding vectors.
pub trait Embedder {
    fn embed(&self, modality: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>>;
    /// Input length the embedder accepts, if fixed.
    fn input_length(&self) -> Option<usize>;
}

impl Embedder for InferenceParams {
    fn embed(&self, modality: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        InferenceParams::embed(self, modality, rows)
    }
    fn input_length(&self) -> Option<usize> {
        Some(self.config.input_length)
    }
}

impl Embedder for ModelParams {
    fn embed(&self, modality: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        ModelParams::embed(self, modality, rows)
    }
    fn input_length(&self) -> Option<usize> {
        Some(self.config.input_length)
    }
}

/// Uses the spectrum itself as its embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawEmbedder;

impl Embedder for RawEmbedder {
    fn embed(&self, _: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }
    fn input_length(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub source_id: String,
    pub class_id: u32,
    pub modality: Modality,
    pub embedding: Vec<f64>,
}

/// Embeddings with uniform dimension and unique source ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.source_id.as_str()) {
                return Err(EvalError::DuplicateSource(r.source_id.clone()));
            }
            if r.embedding.len() != rows[0].embedding.len() {
                return Err(EvalError::ShapeMismatch(format!(
                    "embedding of {} has dim {}, expected {}",
                    r.source_id,
                    r.embedding.len(),
                    rows[0].embedding.len()
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[EmbeddingRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn of_modality(&self, m: Modality) -> Vec<&EmbeddingRow> {
        self.rows.iter().filter(|r| r.modality == m).collect()
    }
}

fn check_lengths(embedder: &dyn Embedder, spectra: &[Spectrum]) -> Result<(), EvalError> {
    let expected = embedder.input_length().or(spectra.first().map(Spectrum::len));
    if let Some(l) = expected {
        if let Some(s) = spectra.iter().find(|s| s.len() != l) {
            return Err(EvalError::ShapeMismatch(format!("{} has length {}, expected {l}", s.source_id, s.len())));
        }
    }
    Ok(())
}

/// Embeds every spectrum with the encoder of its modality, in input order.
pub fn embed_all(embedder: &dyn Embedder, spectra: &[Spectrum]) -> Result<EmbeddingTable, EvalError> {
    check_lengths(embedder, spectra)?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; spectra.len()];
    for m in Modality::BOTH {
        let idx: Vec<usize> = (0..spectra.len()).filter(|&i| spectra[i].modality == m).collect();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| spectra[i].values.as_slice()).collect();
        for (i, e) in idx.into_iter().zip(embedder.embed(m, &rows)) {
            out[i] = Some(e);
        }
    }
    let rows = spectra
        .iter()
        .zip(out)
        .map(|(s, e)| EmbeddingRow {
            source_id: s.source_id.clone(),
            class_id: s.class_id,
            modality: s.modality,
            embedding: e.expect("every modality embedded"),
        })
        .collect();
    EmbeddingTable::new(rows)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, m: Modality, c: u32, v: Vec<f64>) -> Spectrum {
        Spectrum { values: v, modality: m, class_id: c, source_id: id.into() }
    }

    #[test]
    fn embed_all_keeps_order_and_checks_input() {
        let s = vec![
            spec("a", Modality::M2, 0, vec![1.0, 2.0]),
            spec("b", Modality::M1, 1, vec![3.0, 4.0]),
            spec("c", Modality::M2, 1, vec![5.0, 6.0]),
        ];
        let t = embed_all(&RawEmbedder, &s).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.rows()[1].embedding, vec![3.0, 4.0]);
        assert_eq!(t.of_modality(Modality::M2).len(), 2);
        let mut dup = s.clone();
        dup[2].source_id = "a".into();
        assert!(matches!(embed_all(&RawEmbedder, &dup), Err(EvalError::DuplicateSource(_))));
        let mut short = s;
        short[0].values.pop();
        assert!(matches!(embed_all(&RawEmbedder, &short), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn model_embedding_is_deterministic() {
        let cfg = crate::model::ArchConfig::tiny();
        let p = ModelParams::init(&cfg, 0).unwrap().strip_for_inference();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 / 16.0).sqrt()).collect();
        let s = vec![spec("x", Modality::M1, 0, v.clone()), spec("y", Modality::M1, 0, v)];
        let a = embed_all(&p, &s).unwrap();
        assert_eq!(a, embed_all(&p, &s).unwrap());
        assert_eq!(a.rows()[0].embedding, a.rows()[1].embedding);
    }
}
