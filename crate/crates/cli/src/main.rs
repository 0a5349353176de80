//! `marrnet`: dataset generation, training, evaluation and sweeps driven by one
//! experiment config file.

mod overrides;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use marrnet::data::{paired_class_ids, split_sizes, Modality};
use marrnet::eval::{write_curves_csv, write_json, write_metrics_csv};
use marrnet::experiment::{
    aggregate, column_names, eval_replicate, load_spectra, occlude_replicate, run_sweep_point, split_for,
    synth_grid, train_replicate, write_synth_dataset, AggregateReport, DatasetSource, Which,
};
use marrnet::synth::SynthConfig;
use marrnet::{ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "marrnet", version, about = "Cross-modality spectrum matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a scalar field, e.g. `--set train.max_epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 360 classes with about 3.86 M1 and 1.73 M2 spectra per class.
    CmrruffLike,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckpointArg {
    Best,
    Final,
}

impl From<CheckpointArg> for Which {
    fn from(c: CheckpointArg) -> Self {
        match c {
            CheckpointArg::Best => Which::Best,
            CheckpointArg::Final => Which::Final,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus spectrum files).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Target directory; defaults to `<output_dir>/dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured generator settings, keeping its seed.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Load and check the dataset and write the class partitions.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured replicate.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only these replicates.
        #[arg(long = "replicate")]
        replicates: Vec<usize>,
        /// Continue from saved training state where present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Test-split retrieval metrics per replicate and across replicates.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: CheckpointArg,
    },
    /// Accuracy under random masking, cross-modality and within-modality.
    Occlude {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: CheckpointArg,
    },
    /// Train and evaluate one replicate per loss-weight setting.
    GammaSweep {
        #[command(flatten)]
        common: Common,
        /// Run only these grid points.
        #[arg(long = "point")]
        points: Vec<usize>,
        #[arg(long)]
        resume: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| ExperimentError::Io { path: common.config.display().to_string(), reason: e.to_string() })?;
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
    for o in &common.overrides {
        overrides::apply(&mut doc, o).map_err(|e| ExperimentError::Config(e.to_string()))?;
    }
    let text = toml::to_string(&doc).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    cfg.resolve_paths(common.config.parent().unwrap_or_else(|| Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(cfg: &ExperimentConfig, out: Option<PathBuf>, preset: Option<Preset>) -> Result<()> {
    let DatasetSource::Synth(base) = &cfg.data else {
        bail!(ExperimentError::Config("synth needs a synthetic data source".into()));
    };
    let synth = match preset {
        Some(Preset::CmrruffLike) => SynthConfig { length: base.length, ..SynthConfig::cmrruff_like(base.seed) },
        None => base.clone(),
    };
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("dataset"));
    let manifest = write_synth_dataset(&synth, &dir)?;
    let settings = dir.join("synth.toml");
    fs::write(&settings, toml::to_string(&synth)?).with_context(|| settings.display().to_string())?;
    let grid = synth_grid(synth.length);
    println!("wrote {} ({} classes, grid {}..{} with {} points)", manifest.display(), synth.n_classes, grid.min, grid.max, grid.length);
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary {
    replicate: usize,
    train_classes: usize,
    val_classes: usize,
    test_classes: usize,
}

#[derive(Serialize)]
struct DatasetSummary {
    spectra: usize,
    m1: usize,
    m2: usize,
    classes: usize,
    paired_classes: usize,
    length: usize,
    splits: Vec<SplitSummary>,
}

fn cmd_prepare(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_spectra(&cfg.data)?;
    for s in &data {
        s.validate(cfg.arch.input_length)
            .map_err(ExperimentError::from)
            .with_context(|| format!("spectrum {}", s.source_id))?;
    }
    let paired = paired_class_ids(&data);
    split_sizes(paired.len()).map_err(ExperimentError::from)?;
    let mut classes: Vec<u32> = data.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut splits = Vec::new();
    for &r in &cfg.split.replicates {
        let plan = split_for(cfg, &data, r)?;
        write_json(&cfg.replicate_dir(r).join("split.json"), &plan)?;
        splits.push(SplitSummary {
            replicate: r,
            train_classes: plan.train_classes.len(),
            val_classes: plan.val_classes.len(),
            test_classes: plan.test_classes.len(),
        });
    }
    let summary = DatasetSummary {
        spectra: data.len(),
        m1: data.iter().filter(|s| s.modality == Modality::M1).count(),
        m2: data.iter().filter(|s| s.modality == Modality::M2).count(),
        classes: classes.len(),
        paired_classes: paired.len(),
        length: cfg.arch.input_length,
        splits,
    };
    write_json(&cfg.output_dir.join("dataset_summary.json"), &summary)?;
    cfg.write_snapshot()?;
    println!(
        "{} spectra ({} M1, {} M2), {} classes, {} with both modalities",
        summary.spectra, summary.m1, summary.m2, summary.classes, summary.paired_classes
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, only: &[usize], resume: bool, stop_after: Option<usize>) -> Result<()> {
    let data = load_spectra(&cfg.data)?;
    cfg.write_snapshot()?;
    let reps: Vec<usize> = if only.is_empty() { cfg.split.replicates.clone() } else { only.to_vec() };
    for r in reps {
        if !cfg.split.replicates.contains(&r) {
            bail!(ExperimentError::Config(format!("replicate {r} is not in the configured list")));
        }
        let out = train_replicate(cfg, &data, r, resume, stop_after)?;
        println!(
            "replicate {r}: {} epochs, best epoch {} (val Recall@1 {:.4}){}",
            out.history.len(),
            out.best_epoch,
            out.history.get(out.best_epoch).map_or(0.0, |h| h.val_recall1),
            if out.completed { "" } else { ", stopped early" }
        );
    }
    Ok(())
}

fn write_table(path: &Path, aggs: &[AggregateReport], ks: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    let mut header = vec!["direction".to_string(), "statistic".to_string()];
    header.extend(column_names(ks));
    w.write_record(&header)?;
    for a in aggs {
        for stat in ["mean", "std"] {
            let mut row = vec![a.direction.to_string(), stat.to_string()];
            row.extend(a.columns.iter().map(|c| if stat == "mean" { c.mean } else { c.std }.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, which: Which) -> Result<()> {
    let data = load_spectra(&cfg.data)?;
    let mut per_rep = Vec::new();
    let mut rows = Vec::new();
    for &r in &cfg.split.replicates {
        let m = eval_replicate(cfg, &data, r, which)?;
        write_json(&cfg.replicate_dir(r).join("metrics.json"), &m)?;
        rows.extend(m.reports.iter().map(|x| (format!("replicate_{r}"), x.clone())));
        per_rep.push(m);
    }
    let aggs = aggregate(&per_rep, &cfg.eval.ks)?;
    let dir = cfg.output_dir.join("eval");
    write_json(&dir.join("summary.json"), &aggs)?;
    write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    write_table(&dir.join("table.csv"), &aggs, &cfg.eval.ks)?;
    for a in &aggs {
        let cells: Vec<String> =
            a.columns.iter().map(|c| format!("{} {:.2}±{:.2}", c.name, 100.0 * c.mean, 100.0 * c.std)).collect();
        println!("{:>8}: {}", a.direction.to_string(), cells.join("  "));
    }
    Ok(())
}

fn cmd_occlude(cfg: &ExperimentConfig, which: Which) -> Result<()> {
    let data = load_spectra(&cfg.data)?;
    for &r in &cfg.split.replicates {
        let curves = occlude_replicate(cfg, &data, r, which)?;
        let dir = cfg.replicate_dir(r);
        write_json(&dir.join("occlusion.json"), &curves)?;
        write_curves_csv(&dir.join("occlusion.csv"), &curves)?;
        for c in &curves {
            let cells: Vec<String> =
                c.mask_ratios.iter().zip(&c.accuracy).map(|(m, a)| format!("{m}: {a:.4}")).collect();
            println!("replicate {r} {} ({} queries): {}", c.method, c.n_queries, cells.join("  "));
        }
    }
    Ok(())
}

fn cmd_gamma_sweep(cfg: &ExperimentConfig, only: &[usize], resume: bool) -> Result<()> {
    let data = load_spectra(&cfg.data)?;
    cfg.write_snapshot()?;
    let idx: Vec<usize> = if only.is_empty() { (0..cfg.sweep.points.len()).collect() } else { only.to_vec() };
    let mut rows = Vec::new();
    for i in idx {
        let row = run_sweep_point(cfg, &data, i, resume)?;
        println!(
            "point {i}: gamma1=gamma6={} gamma2..5={} gamma7={} -> Recall@1 {:.4}",
            row.point.adversarial, row.point.translation, row.point.triplet, row.recall1
        );
        rows.push(row);
    }
    let dir = cfg.output_dir.join("sweep");
    write_json(&dir.join("table.json"), &rows)?;
    let path = dir.join("table.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| path.display().to_string())?;
    w.write_record(["point", "gamma1=gamma6", "gamma2=gamma3=gamma4=gamma5", "gamma7", "Recall@1"])?;
    for r in &rows {
        w.write_record([
            r.index.to_string(),
            r.point.adversarial.to_string(),
            r.point.translation.to_string(),
            r.point.triplet.to_string(),
            r.recall1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, preset } => cmd_synth(&load_config(&common)?, out, preset),
        Command::Prepare { common } => cmd_prepare(&load_config(&common)?),
        Command::Train { common, replicates, resume, stop_after } => {
            cmd_train(&load_config(&common)?, &replicates, resume, stop_after)
        }
        Command::Eval { common, checkpoint } => cmd_eval(&load_config(&common)?, checkpoint.into()),
        Command::Occlude { common, checkpoint } => cmd_occlude(&load_config(&common)?, checkpoint.into()),
        Command::GammaSweep { common, points, resume } => cmd_gamma_sweep(&load_config(&common)?, &points, resume),
    }
}

#[derive(Serialize)]
struct ErrorRecord {
    kind: &'static str,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<ExperimentError>().map_or("error", ExperimentError::kind);
            let record = ErrorRecord { kind, message: format!("{e:#}") };
            eprintln!("{}", serde_json::json!({ "error": record }));
            ExitCode::FAILURE
        }
    }
}
