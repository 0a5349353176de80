use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{train_step, BestModel, EpochRecord, StepRates, TrainConfig, TrainError, TrainState};
use crate::data::{
    augment, sample_pair_batch, sample_triplet_batch, select_classes, ClassIndex, Modality, SplitPlan, Spectrum,
    TripletBatch,
};
use crate::eval::evaluate;
use crate::losses::LossReport;
use crate::model::{ArchConfig, ModelParams};
use crate::rng;

/// Outputs of a training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub final_params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// False when stopped early by [`FitOptions::stop_after`].
    pub completed: bool,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Training state written after every epoch.
    pub state_path: Option<PathBuf>,
    /// One JSON record per epoch.
    pub log_path: Option<PathBuf>,
    /// Continue from `state_path` if it exists.
    pub resume: bool,
    /// Run at most this many epochs in this call.
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Training and validation data for one split.
pub struct Trainer {
    cfg: TrainConfig,
    arch: ArchConfig,
    train: Vec<Spectrum>,
    val: Vec<Spectrum>,
    index: ClassIndex,
    m1: Vec<usize>,
}

fn io_err(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io { path: path.display().to_string(), reason: e.to_string() }
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, arch: &ArchConfig, data: &[Spectrum], split: &SplitPlan) -> Result<Self, TrainError> {
        cfg.validate()?;
        arch.validate()?;
        for s in data {
            s.validate(arch.input_length)?;
        }
        let train = select_classes(data, &split.train_classes);
        let val = select_classes(data, &split.val_classes);
        let index = ClassIndex::new(&train);
        if index.eligible_classes().len() < 2 {
            return Err(TrainError::InvalidConfig("training split needs two classes with both modalities".into()));
        }
        let m1: Vec<usize> = (0..train.len())
            .filter(|&i| train[i].modality == Modality::M1 && !index.members(train[i].class_id, Modality::M2).is_empty())
            .collect();
        if val.iter().all(|s| s.modality == Modality::M1) || val.iter().all(|s| s.modality == Modality::M2) {
            return Err(TrainError::InvalidConfig("validation split needs both modalities".into()));
        }
        Ok(Self { cfg: cfg.clone(), arch: arch.clone(), train, val, index, m1 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| self.m1.len().div_ceil(self.cfg.pairs_per_step).max(1))
    }

    pub fn initial_state(&self) -> Result<TrainState, TrainError> {
        Ok(TrainState::new(ModelParams::init(&self.arch, self.cfg.seed)?))
    }

    /// Averaged-direction validation `(Recall@1, mAP@5)`.
    pub fn validate(&self, params: &ModelParams) -> Result<(f64, f64), TrainError> {
        let r = evaluate(params, &self.val, &[1, 5])?;
        Ok((r[2].recall_at[&1], r[2].map_at[&5]))
    }

    fn augmented(&self, s: &[Spectrum], rng: &mut rng::Rng) -> Vec<Spectrum> {
        s.iter().map(|x| augment(x, &self.cfg.augment, rng)).collect()
    }

    /// Runs one epoch, validates, and advances the state.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochRecord, TrainError> {
        let cfg = &self.cfg;
        let epoch = state.epoch;
        let mut rng = rng::stream(cfg.seed, "epoch", epoch as u64);
        let steps = self.steps_per_epoch();
        let b = cfg.pairs_per_step;
        let mut order = Vec::with_capacity(steps * b);
        while order.len() < steps * b {
            let mut pass = self.m1.clone();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        let rates = StepRates { main: cfg.lr_main_at(epoch), disc: cfg.lr_disc_at(epoch) };
        let anchors: &[Modality] = if cfg.symmetric_triplets { &Modality::BOTH } else { &[Modality::M1] };
        state.step_in_epoch = 0;
        let mut reports: Vec<LossReport> = Vec::with_capacity(steps);
        for s in 0..steps {
            let mut pair = sample_pair_batch(&self.train, &self.index, &order[s * b..(s + 1) * b], &mut rng);
            pair.m1 = self.augmented(&pair.m1, &mut rng);
            pair.m2 = self.augmented(&pair.m2, &mut rng);
            let mut triplets: Vec<TripletBatch> = Vec::new();
            for &m in anchors {
                let mut t = sample_triplet_batch(&self.train, &self.index, cfg.weights.k, m, &mut rng)?;
                t.anchors = self.augmented(&t.anchors, &mut rng);
                t.positives = self.augmented(&t.positives, &mut rng);
                t.negatives = self.augmented(&t.negatives, &mut rng);
                triplets.push(t);
            }
            let (report, _) = train_step(state, cfg, &pair, &triplets, rates)?;
            reports.push(report);
        }
        let (val_recall1, val_map5) = self.validate(&state.params)?;
        let better = state.best.as_ref().is_none_or(|b| (val_recall1, val_map5) >= (b.recall1, b.map5));
        if better {
            state.best = Some(BestModel { epoch, recall1: val_recall1, map5: val_map5, params: state.params.clone() });
        }
        let record = EpochRecord {
            epoch,
            lr_main: rates.main,
            lr_disc: rates.disc,
            steps,
            loss: LossReport::mean(&reports),
            val_recall1,
            val_map5,
        };
        state.history.push(record.clone());
        state.epoch += 1;
        state.step_in_epoch = 0;
        Ok(record)
    }
}

fn write_log(path: &Path, records: &[EpochRecord], append: bool) -> Result<(), TrainError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Configurations agree on everything that affects the trajectory.
fn same_trajectory(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { max_epochs: 0, ..a.clone() } == TrainConfig { max_epochs: 0, ..b.clone() }
}

/// Trains on `split.train_classes`, selecting the epoch with the best validation
/// Recall@1 (mAP@5 breaks ties; later epochs win exact ties).
pub fn fit(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    data: &[Spectrum],
    split: &SplitPlan,
    mut opts: FitOptions<'_>,
) -> Result<FitOutcome, TrainError> {
    let trainer = Trainer::new(cfg, arch, data, split)?;
    let mut state = match &opts.state_path {
        Some(p) if opts.resume && p.exists() => {
            let (s, saved) = TrainState::load(p)?;
            if !same_trajectory(&saved, cfg) || s.params.config != *arch {
                return Err(TrainError::InvalidConfig(format!("{} was written with a different configuration", p.display())));
            }
            s
        }
        _ => trainer.initial_state()?,
    };
    if let Some(log) = &opts.log_path {
        write_log(log, &state.history, false)?;
    }
    let mut ran = 0;
    while state.epoch < cfg.max_epochs && opts.stop_after.is_none_or(|n| ran < n) {
        let record = trainer.run_epoch(&mut state)?;
        ran += 1;
        if !state.is_finite() {
            return Err(TrainError::NonFiniteLoss { term: "parameters", epoch: record.epoch, step: record.steps });
        }
        if let Some(log) = &opts.log_path {
            write_log(log, std::slice::from_ref(&record), true)?;
        }
        if let Some(p) = &opts.state_path {
            state.save(p, cfg)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
    }
    let best = state.best.clone().expect("at least one epoch has run");
    Ok(FitOutcome {
        best: best.params,
        best_epoch: best.epoch,
        final_params: state.params,
        history: state.history,
        completed: state.epoch >= cfg.max_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_splits;
    use crate::model::Checkpoint;
    use crate::synth::{gen_dataset, PerClass, SynthConfig};

    fn toy() -> (Vec<Spectrum>, SplitPlan) {
        let d = gen_dataset(&SynthConfig {
            n_classes: 12,
            per_class_m1: PerClass::Fixed(2),
            per_class_m2: PerClass::Fixed(1),
            gap_level: 0.2,
            noise_sigma: 0.01,
            length: 16,
            seed: 1,
        });
        let classes = crate::data::paired_class_ids(&d);
        let split = make_splits(&classes, 7, 0).unwrap();
        (d, split)
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { max_epochs: epochs, pairs_per_step: 4, seed: 3, ..Default::default() }
    }

    #[test]
    fn smoke_run_produces_loadable_checkpoint() {
        let (d, split) = toy();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.jsonl");
        let out = fit(&small_cfg(2), &ArchConfig::tiny(), &d, &split, FitOptions { log_path: Some(log.clone()), ..Default::default() })
            .unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.completed);
        let lines: Vec<EpochRecord> =
            std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].epoch, 1);
        let path = dir.path().join("best.ckpt");
        Checkpoint::Inference(out.best.strip_for_inference()).save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_ok());
        let best = out.history.iter().map(|r| r.val_recall1).fold(0.0, f64::max);
        assert_eq!(out.history[out.best_epoch].val_recall1, best);
        assert!(best >= out.history.last().unwrap().val_recall1);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_params() {
        let (d, split) = toy();
        let cfg = small_cfg(3);
        let arch = ArchConfig::tiny();
        let straight = fit(&cfg, &arch, &d, &split, FitOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join("state.bin");
        let log = dir.path().join("log.jsonl");
        let opts = |stop| FitOptions {
            state_path: Some(state.clone()),
            log_path: Some(log.clone()),
            resume: true,
            stop_after: stop,
            on_epoch: None,
        };
        let first = fit(&cfg, &arch, &d, &split, opts(Some(1))).unwrap();
        assert!(!first.completed);
        let resumed = fit(&cfg, &arch, &d, &split, opts(None)).unwrap();
        assert!(resumed.completed);
        assert_eq!(resumed.final_params, straight.final_params);
        assert_eq!(resumed.best, straight.best);
        assert_eq!(resumed.history, straight.history);
        assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

        let other = TrainConfig { lr_main: 2e-4, ..cfg };
        assert!(matches!(fit(&other, &arch, &d, &split, opts(None)), Err(TrainError::InvalidConfig(_))));
    }
}
