//! Config-driven experiment pipeline: dataset materialization, per-replicate
//! training, evaluation, occlusion sweeps and loss-weight sweeps.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.toml                      resolved configuration
//! replicate_{r}/split.json         class partition
//! replicate_{r}/state.bin          resumable training state
//! replicate_{r}/train_log.jsonl    one record per epoch
//! replicate_{r}/best.ckpt          best validation epoch, full model
//! replicate_{r}/final.ckpt         last epoch, full model
//! replicate_{r}/metrics.json       test metrics of one checkpoint
//! replicate_{r}/occlusion.json     occlusion curves of one checkpoint
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    load_dataset, make_splits, paired_class_ids, select_classes, write_manifest, DataError, Grid, ManifestRecord,
    SplitPlan, Spectrum, MAX_REPLICATE,
};
use crate::eval::{
    evaluate, occlusion_test, within_modality_baseline, write_json, Direction, EvalError, MetricsReport,
    OcclusionConfig, OcclusionCurve, DEFAULT_KS,
};
use crate::losses::LossWeights;
use crate::model::{ArchConfig, Checkpoint, ModelError};
use crate::synth::{gen_dataset, SynthConfig};
use crate::train::{fit, FitOptions, FitOutcome, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing artifact {0}")]
    Missing(String),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

impl ExperimentError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::Data(_) => "data",
            ExperimentError::Model(_) => "model",
            ExperimentError::Train(TrainError::NonFiniteLoss { .. }) => "non_finite_loss",
            ExperimentError::Train(_) => "train",
            ExperimentError::Eval(_) => "eval",
            ExperimentError::Missing(_) => "missing_artifact",
            ExperimentError::Io { .. } => "io",
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> ExperimentError {
    ExperimentError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// Where the spectra come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A manifest of spectrum files, resampled onto `grid`. A relative path is
    /// resolved against the directory of the configuration file.
    Manifest {
        manifest: PathBuf,
        #[serde(default)]
        grid: Grid,
    },
    /// Generated in memory.
    Synth(SynthConfig),
}

impl DatasetSource {
    pub fn length(&self) -> usize {
        match self {
            DatasetSource::Manifest { grid, .. } => grid.length,
            DatasetSource::Synth(s) => s.length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub replicates: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, replicates: (0..=MAX_REPLICATE).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec() }
    }
}

/// One loss-weight setting: γ1 = γ6 = `adversarial`, γ2..γ5 = `translation`,
/// γ7 = `triplet`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub adversarial: f64,
    pub translation: f64,
    pub triplet: f64,
}

impl SweepPoint {
    pub fn apply(&self, base: &LossWeights) -> LossWeights {
        LossWeights {
            gamma1: self.adversarial,
            gamma6: self.adversarial,
            gamma2: self.translation,
            gamma3: self.translation,
            gamma4: self.translation,
            gamma5: self.translation,
            gamma7: self.triplet,
            ..*base
        }
    }
}

/// The nine-row weighting grid around the default weights.
pub fn default_sweep_grid() -> Vec<SweepPoint> {
    let mut grid: Vec<SweepPoint> = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
        .iter()
        .map(|&t| SweepPoint { adversarial: 1e-2, translation: t * 1e-3, triplet: 1.0 })
        .collect();
    grid.push(SweepPoint { adversarial: 2e-2, translation: 1e-3, triplet: 1.0 });
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub points: Vec<SweepPoint>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { points: default_sweep_grid() }
    }
}

/// Everything one experiment needs. Seeds must fit in an `i64` to be written as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DatasetSource,
    #[serde(default)]
    pub arch: ArchConfig,
    /// Loss weights live in `train.weights`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub occlusion: OcclusionConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads and validates a configuration file. A relative manifest path is
    /// made relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSource::Manifest { manifest, .. } = &mut self.data {
            if manifest.is_relative() {
                *manifest = base.join(&*manifest);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.arch.validate()?;
        self.train.validate()?;
        self.occlusion.validate()?;
        match &self.data {
            DatasetSource::Manifest { grid, .. } => grid.validate()?,
            DatasetSource::Synth(s) => {
                if s.n_classes < 10 {
                    return bad(format!("synthetic data needs at least 10 classes, got {}", s.n_classes));
                }
                if !(0.0..=1.0).contains(&s.gap_level) || !(s.noise_sigma >= 0.0) {
                    return bad(format!("gap level {} or noise {} out of range", s.gap_level, s.noise_sigma));
                }
            }
        }
        if self.data.length() != self.arch.input_length {
            return bad(format!(
                "spectrum length {} differs from the model input length {}",
                self.data.length(),
                self.arch.input_length
            ));
        }
        let reps = &self.split.replicates;
        if reps.is_empty() {
            return bad("at least one replicate is required".into());
        }
        if let Some(r) = reps.iter().find(|&&r| r > MAX_REPLICATE) {
            return bad(format!("replicate {r} outside 0..={MAX_REPLICATE}"));
        }
        let mut sorted = reps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != reps.len() {
            return bad("replicate list has duplicates".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("evaluation ks must be positive".into());
        }
        for p in &self.sweep.points {
            p.apply(&self.train.weights).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn replicate_dir(&self, replicate: usize) -> PathBuf {
        self.output_dir.join(format!("replicate_{replicate}"))
    }

    /// Writes the configuration into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf, ExperimentError> {
        fs::create_dir_all(&self.output_dir).map_err(|e| io_err(&self.output_dir, e))?;
        let path = self.output_dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

/// Loads or generates the spectra described by `source`.
pub fn load_spectra(source: &DatasetSource) -> Result<Vec<Spectrum>, ExperimentError> {
    Ok(match source {
        DatasetSource::Manifest { manifest, grid } => load_dataset(manifest, grid)?,
        DatasetSource::Synth(s) => gen_dataset(s),
    })
}

/// Grid used for synthetic files of length `length`.
pub fn synth_grid(length: usize) -> Grid {
    Grid { length, ..Grid::default() }
}

/// Writes a synthetic dataset as `manifest.csv` plus one two-column text file
/// per spectrum under `spectra/`. Reading the manifest back with
/// [`synth_grid`] reproduces the generated spectra.
pub fn write_synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf, ExperimentError> {
    let spectra_dir = dir.join("spectra");
    fs::create_dir_all(&spectra_dir).map_err(|e| io_err(&spectra_dir, e))?;
    let grid = synth_grid(cfg.length);
    let xs = grid.positions();
    let mut records = Vec::new();
    for s in gen_dataset(cfg) {
        let rel = format!("spectra/{}.txt", s.source_id);
        let mut text = String::with_capacity(s.values.len() * 24);
        text.push_str(&format!("# class {} {}\n", s.class_id, s.modality));
        for (x, y) in xs.iter().zip(&s.values) {
            text.push_str(&format!("{x} {y}\n"));
        }
        let file = dir.join(&rel);
        fs::write(&file, text).map_err(|e| io_err(&file, e))?;
        records.push(ManifestRecord { path: rel, modality: s.modality, class_id: s.class_id });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

pub fn split_for(cfg: &ExperimentConfig, data: &[Spectrum], replicate: usize) -> Result<SplitPlan, ExperimentError> {
    Ok(make_splits(&paired_class_ids(data), cfg.split.seed, replicate)?)
}

/// Trains one replicate and writes its split, state, log and checkpoints.
/// With `resume`, continues from an existing state file.
pub fn train_replicate(
    cfg: &ExperimentConfig,
    data: &[Spectrum],
    replicate: usize,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<FitOutcome, ExperimentError> {
    let dir = cfg.replicate_dir(replicate);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let split = split_for(cfg, data, replicate)?;
    write_json(&dir.join("split.json"), &split)?;
    let opts = FitOptions {
        state_path: Some(dir.join("state.bin")),
        log_path: Some(dir.join("train_log.jsonl")),
        resume,
        stop_after,
        on_epoch: None,
    };
    let train = TrainConfig { seed: crate::rng::derive_seed(cfg.train.seed, "replicate", replicate as u64), ..cfg.train.clone() };
    let out = fit(&train, &cfg.arch, data, &split, opts)?;
    if out.completed {
        Checkpoint::Full(out.best.clone()).save(&dir.join("best.ckpt"))?;
        Checkpoint::Full(out.final_params.clone()).save(&dir.join("final.ckpt"))?;
    }
    Ok(out)
}

/// Which checkpoint of a replicate to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    #[default]
    Best,
    Final,
}

impl Which {
    pub fn file_name(self) -> &'static str {
        match self {
            Which::Best => "best.ckpt",
            Which::Final => "final.ckpt",
        }
    }
}

pub fn load_checkpoint(cfg: &ExperimentConfig, replicate: usize, which: Which) -> Result<Checkpoint, ExperimentError> {
    let path = cfg.replicate_dir(replicate).join(which.file_name());
    if !path.exists() {
        return Err(ExperimentError::Missing(path.display().to_string()));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.config() != &cfg.arch {
        return Err(ExperimentError::Config(format!("{} was trained with another architecture", path.display())));
    }
    Ok(ckpt)
}

/// Test-split metrics of one replicate: both directions and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub checkpoint: Which,
    pub reports: Vec<MetricsReport>,
}

pub fn eval_replicate(
    cfg: &ExperimentConfig,
    data: &[Spectrum],
    replicate: usize,
    which: Which,
) -> Result<ReplicateMetrics, ExperimentError> {
    let ckpt = load_checkpoint(cfg, replicate, which)?;
    let test = select_classes(data, &split_for(cfg, data, replicate)?.test_classes);
    let reports = evaluate(&ckpt.inference(), &test, &cfg.eval.ks)?;
    Ok(ReplicateMetrics { replicate, checkpoint: which, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single replicate.
    pub std: f64,
    pub values: Vec<f64>,
}

/// Mean and spread of every metric column across replicates, for one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub direction: Direction,
    pub replicates: Vec<usize>,
    pub columns: Vec<ColumnSummary>,
}

/// Column names in table order: `Recall@k` for every k, then `mAP@k`.
pub fn column_names(ks: &[usize]) -> Vec<String> {
    ks.iter().map(|k| format!("Recall@{k}")).chain(ks.iter().map(|k| format!("mAP@{k}"))).collect()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One aggregate per direction, in the order the replicate reports use.
pub fn aggregate(per_replicate: &[ReplicateMetrics], ks: &[usize]) -> Result<Vec<AggregateReport>, ExperimentError> {
    let Some(first) = per_replicate.first() else {
        return Err(ExperimentError::Config("nothing to aggregate".into()));
    };
    let names = column_names(ks);
    let mut out = Vec::new();
    for (d, head) in first.reports.iter().enumerate() {
        let mut columns = Vec::new();
        for (j, name) in names.iter().enumerate() {
            let (k, recall) = if j < ks.len() { (ks[j], true) } else { (ks[j - ks.len()], false) };
            let values = per_replicate
                .iter()
                .map(|r| {
                    let rep = &r.reports[d];
                    let map = if recall { &rep.recall_at } else { &rep.map_at };
                    map.get(&k).copied().ok_or_else(|| ExperimentError::Config(format!("{name} was not evaluated")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let (mean, std) = mean_std(&values);
            columns.push(ColumnSummary { name: name.clone(), mean, std, values });
        }
        out.push(AggregateReport {
            direction: head.direction,
            replicates: per_replicate.iter().map(|r| r.replicate).collect(),
            columns,
        });
    }
    Ok(out)
}

/// Cross-modality and within-modality occlusion curves on the test split.
pub fn occlude_replicate(
    cfg: &ExperimentConfig,
    data: &[Spectrum],
    replicate: usize,
    which: Which,
) -> Result<Vec<OcclusionCurve>, ExperimentError> {
    let ckpt = load_checkpoint(cfg, replicate, which)?;
    let test = select_classes(data, &split_for(cfg, data, replicate)?.test_classes);
    let model = ckpt.inference();
    let occ = OcclusionConfig {
        seed: crate::rng::derive_seed(cfg.occlusion.seed, "replicate", replicate as u64),
        ..cfg.occlusion.clone()
    };
    Ok(vec![occlusion_test(&model, &test, &occ)?, within_modality_baseline(&model, &test, &occ)?])
}

/// One row of a loss-weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub point: SweepPoint,
    pub replicate: usize,
    /// Averaged-direction test Recall@1 of the best validation checkpoint.
    pub recall1: f64,
}

/// Configuration of sweep point `index`: the base config with the point's
/// weights, its first replicate only, and its own output directory.
pub fn sweep_point_config(cfg: &ExperimentConfig, index: usize) -> Result<ExperimentConfig, ExperimentError> {
    let point = cfg
        .sweep
        .points
        .get(index)
        .ok_or_else(|| ExperimentError::Config(format!("no sweep point {index}")))?;
    let mut c = cfg.clone();
    c.train.weights = point.apply(&cfg.train.weights);
    c.split.replicates = vec![cfg.split.replicates[0]];
    c.sweep = SweepConfig { points: vec![*point] };
    c.output_dir = cfg.output_dir.join("sweep").join(format!("point_{index}"));
    Ok(c)
}

/// Trains and evaluates one sweep point, writing its config next to its results.
pub fn run_sweep_point(
    cfg: &ExperimentConfig,
    data: &[Spectrum],
    index: usize,
    resume: bool,
) -> Result<SweepRow, ExperimentError> {
    let c = sweep_point_config(cfg, index)?;
    c.write_snapshot()?;
    let r = c.split.replicates[0];
    train_replicate(&c, data, r, resume, None)?;
    let m = eval_replicate(&c, data, r, Which::Best)?;
    write_json(&c.replicate_dir(r).join("metrics.json"), &m)?;
    let avg = m.reports.iter().find(|x| x.direction == Direction::Averaged).expect("averaged report");
    Ok(SweepRow { index, point: c.sweep.points[0], replicate: r, recall1: avg.recall1() })
}
