use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, TrainError};
use crate::losses::LossReport;
use crate::model::{Archive, ArchConfig, ModelParams};
use crate::tensor::Tensor;

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub steps: usize,
    /// Mean of the step reports.
    pub loss: LossReport,
    pub val_recall1: f64,
    pub val_map5: f64,
}

/// Parameters of the epoch with the best validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub recall1: f64,
    pub map5: f64,
    pub params: ModelParams,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam_main: Adam,
    pub adam_disc: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
}

#[derive(Serialize, Deserialize)]
struct BestMeta {
    epoch: usize,
    recall1: f64,
    map5: f64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    format: u32,
    epoch: usize,
    step_in_epoch: usize,
    adam_main_step: u64,
    adam_disc_step: u64,
    arch: ArchConfig,
    train: TrainConfig,
    best: Option<BestMeta>,
    history: Vec<EpochRecord>,
}

const FORMAT: u32 = 1;

fn prefixed(prefix: &str, items: impl IntoIterator<Item = (String, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}/{n}"), t)).collect()
}

fn strip(items: Vec<(String, Tensor)>, prefix: &str) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n[prefix.len() + 1..].to_string(), t)).collect()
}

fn corrupt(m: impl Into<String>) -> TrainError {
    TrainError::Model(crate::model::ModelError::Checkpoint(m.into()))
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            adam_main: Adam::default(),
            adam_disc: Adam::default(),
            epoch: 0,
            step_in_epoch: 0,
            history: Vec::new(),
            best: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.adam_main.is_finite() && self.adam_disc.is_finite()
    }

    /// Persists the state together with the configuration that produced it.
    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<(), TrainError> {
        let meta = StateMeta {
            format: FORMAT,
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            adam_main_step: self.adam_main.step,
            adam_disc_step: self.adam_disc.step,
            arch: self.params.config.clone(),
            train: cfg.clone(),
            best: self.best.as_ref().map(|b| BestMeta { epoch: b.epoch, recall1: b.recall1, map5: b.map5 }),
            history: self.history.clone(),
        };
        let mut tensors = prefixed("params", self.params.named_tensors());
        for (name, adam) in [("adam_main", &self.adam_main), ("adam_disc", &self.adam_disc)] {
            tensors.extend(prefixed(&format!("{name}.m"), adam.m.clone()));
            tensors.extend(prefixed(&format!("{name}.v"), adam.v.clone()));
        }
        if let Some(b) = &self.best {
            tensors.extend(prefixed("best", b.params.named_tensors()));
        }
        let meta = toml::to_string(&meta).map_err(|e| corrupt(format!("cannot encode state: {e}")))?;
        Archive { meta, tensors }.save(path)?;
        Ok(())
    }

    /// Loads a saved state and the configuration stored with it.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig), TrainError> {
        let mut a = Archive::load(path)?;
        let meta: StateMeta = toml::from_str(&a.meta).map_err(|e| corrupt(format!("bad state header: {e}")))?;
        if meta.format != FORMAT {
            return Err(corrupt(format!("unsupported state format {}", meta.format)));
        }
        let params = ModelParams::from_named(&meta.arch, &strip(a.take_prefixed("params/"), "params"))?;
        let mut adams = Vec::new();
        for (name, step) in [("adam_main", meta.adam_main_step), ("adam_disc", meta.adam_disc_step)] {
            let m: BTreeMap<_, _> = strip(a.take_prefixed(&format!("{name}.m/")), &format!("{name}.m")).into_iter().collect();
            let v: BTreeMap<_, _> = strip(a.take_prefixed(&format!("{name}.v/")), &format!("{name}.v")).into_iter().collect();
            adams.push(Adam { step, m, v });
        }
        let best = match meta.best {
            Some(b) => Some(BestModel {
                epoch: b.epoch,
                recall1: b.recall1,
                map5: b.map5,
                params: ModelParams::from_named(&meta.arch, &strip(a.take_prefixed("best/"), "best"))?,
            }),
            None => None,
        };
        if !a.tensors.is_empty() {
            return Err(corrupt(format!("unexpected tensor {}", a.tensors[0].0)));
        }
        let adam_disc = adams.pop().expect("two groups");
        let adam_main = adams.pop().expect("two groups");
        let state = Self {
            params,
            adam_main,
            adam_disc,
            epoch: meta.epoch,
            step_in_epoch: meta.step_in_epoch,
            history: meta.history,
            best,
        };
        Ok((state, meta.train))
    }
}
