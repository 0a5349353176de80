use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{embed_all, rank, Embedder, EmbeddingRow, EvalError};
use crate::data::{Modality, Spectrum};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    pub ratios: Vec<f64>,
    /// Masks drawn per query and ratio.
    pub n_masks: usize,
    pub fill: f64,
    pub seed: u64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { ratios: vec![0.1, 0.3, 0.5, 0.7], n_masks: 100, fill: 0.0, seed: 0 }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_masks == 0 {
            return Err(EvalError::InvalidConfig("at least one mask per sample is required".into()));
        }
        if let Some(&r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(EvalError::InvalidRatio(r));
        }
        Ok(())
    }
}

/// Matching accuracy as a function of mask size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionCurve {
    pub method: String,
    pub mask_ratios: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Masked queries evaluated per ratio.
    pub trials: Vec<usize>,
    pub n_masks: usize,
    pub fill_value: f64,
    /// Queries retained after filtering.
    pub n_queries: usize,
}

impl OcclusionCurve {
    /// Binomial standard error of the accuracy at ratio index `i`.
    pub fn sigma(&self, i: usize) -> f64 {
        let p = self.accuracy[i];
        if self.trials[i] == 0 {
            return 0.0;
        }
        (p * (1.0 - p) / self.trials[i] as f64).sqrt()
    }
}

/// Number of points a mask of `ratio` covers on a length-`length` signal.
pub(crate) fn window_len(ratio: f64, length: usize) -> usize {
    (ratio * length as f64).floor() as usize
}

/// Sets a contiguous window of `⌊ratio·L⌋` points starting at `position` to `fill`.
pub fn mask_spectrum(s: &Spectrum, ratio: f64, position: usize, fill: f64) -> Result<Spectrum, EvalError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(EvalError::InvalidRatio(ratio));
    }
    let len = window_len(ratio, s.len());
    if position + len > s.len() {
        return Err(EvalError::InvalidWindow { len, position, length: s.len() });
    }
    let mut out = s.clone();
    out.values[position..position + len].fill(fill);
    Ok(out)
}

/// `n` masked copies of `s` at uniformly drawn positions.
fn masked_copies(s: &Spectrum, ratio: f64, n: usize, fill: f64, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let len = window_len(ratio, s.len());
    (0..n)
        .map(|_| {
            let pos = rng.random_range(0..=s.len() - len);
            mask_spectrum(s, ratio, pos, fill).expect("window fits").values
        })
        .collect()
}

/// Cross-modality Recall@1 under random masking of the queries, over queries
/// (of both modalities) that are matched correctly when unmasked.
pub fn occlusion_test(
    embedder: &dyn Embedder,
    spectra: &[Spectrum],
    cfg: &OcclusionConfig,
) -> Result<OcclusionCurve, EvalError> {
    cfg.validate()?;
    let table = embed_all(embedder, spectra)?;
    let mut kept: Vec<(usize, Vec<&EmbeddingRow>)> = Vec::new();
    for m in Modality::BOTH {
        let gallery = table.of_modality(m.other());
        for (i, row) in table.rows().iter().enumerate().filter(|(_, r)| r.modality == m) {
            let top = rank(&row.embedding, &gallery)?[0];
            if gallery[top].class_id == row.class_id {
                kept.push((i, gallery.clone()));
            }
        }
    }
    let mut curve = OcclusionCurve {
        method: "cross_modality".into(),
        mask_ratios: cfg.ratios.clone(),
        accuracy: Vec::new(),
        trials: Vec::new(),
        n_masks: cfg.n_masks,
        fill_value: cfg.fill,
        n_queries: kept.len(),
    };
    for (ri, &ratio) in cfg.ratios.iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, "occlusion", ri as u64);
        let mut hits = 0usize;
        for (i, gallery) in &kept {
            let s = &spectra[*i];
            let copies = masked_copies(s, ratio, cfg.n_masks, cfg.fill, &mut rng);
            let rows: Vec<&[f64]> = copies.iter().map(Vec::as_slice).collect();
            for e in embedder.embed(s.modality, &rows) {
                if gallery[rank(&e, gallery)?[0]].class_id == s.class_id {
                    hits += 1;
                }
            }
        }
        let trials = kept.len() * cfg.n_masks;
        curve.accuracy.push(if trials == 0 { 0.0 } else { hits as f64 / trials as f64 });
        curve.trials.push(trials);
    }
    Ok(curve)
}

/// Fraction of samples whose masked embedding is nearest to their own unmasked
/// embedding within the same modality, averaged over the modalities present.
pub fn within_modality_baseline(
    embedder: &dyn Embedder,
    spectra: &[Spectrum],
    cfg: &OcclusionConfig,
) -> Result<OcclusionCurve, EvalError> {
    cfg.validate()?;
    let table = embed_all(embedder, spectra)?;
    let groups: Vec<Vec<usize>> = Modality::BOTH
        .iter()
        .map(|&m| (0..spectra.len()).filter(|&i| spectra[i].modality == m).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    if groups.is_empty() || groups.iter().any(|g| g.len() < 2) {
        return Err(EvalError::InvalidConfig("each modality needs at least two samples".into()));
    }
    let mut curve = OcclusionCurve {
        method: "within_modality".into(),
        mask_ratios: cfg.ratios.clone(),
        accuracy: Vec::new(),
        trials: Vec::new(),
        n_masks: cfg.n_masks,
        fill_value: cfg.fill,
        n_queries: spectra.len(),
    };
    for (ri, &ratio) in cfg.ratios.iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, "within-modality", ri as u64);
        let mut acc = 0.0;
        let mut trials = 0;
        for g in &groups {
            let reference: Vec<&EmbeddingRow> = g.iter().map(|&i| &table.rows()[i]).collect();
            let mut hits = 0usize;
            for (p, &i) in g.iter().enumerate() {
                let copies = masked_copies(&spectra[i], ratio, cfg.n_masks, cfg.fill, &mut rng);
                let rows: Vec<&[f64]> = copies.iter().map(Vec::as_slice).collect();
                for e in embedder.embed(spectra[i].modality, &rows) {
                    if rank(&e, &reference)?[0] == p {
                        hits += 1;
                    }
                }
            }
            acc += hits as f64 / (g.len() * cfg.n_masks) as f64;
            trials += g.len() * cfg.n_masks;
        }
        curve.accuracy.push(acc / groups.len() as f64);
        curve.trials.push(trials);
    }
    Ok(curve)
}
