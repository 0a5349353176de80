use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use marrnet::data::{load_dataset, read_manifest};
use marrnet::experiment::{synth_grid, ReplicateMetrics};
use marrnet::ExperimentConfig;

const TINY: &str = r#"
output_dir = "out"

[data]
source = "synth"
n_classes = 12
per_class_m1 = 2
per_class_m2 = { mean = 1.5 }
gap_level = 0.3
noise_sigma = 0.01
length = 16
seed = 3

[arch]
input_length = 16
encoder_blocks = 3
base_channels = 2
bottleneck_dim = 8
kernel_size = 3
siamese_channels = [2, 4, 8]
siamese_input_length = 8
embedding_dim = 4
disc_blocks = 1

[train]
max_epochs = 3
pairs_per_step = 4
steps_per_epoch = 2

[split]
seed = 1
replicates = [0]

[occlusion]
n_masks = 4
"#;

fn marrnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marrnet")).args(args).current_dir(cwd).output().expect("spawn")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = marrnet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn tiny_arch_in_fixture_is_valid() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.validate().unwrap();
}

#[test]
fn synth_is_byte_reproducible_and_loads_back() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["synth", "-c", "exp.toml", "--out", "a"], d);
    ok(&["synth", "-c", "exp.toml", "--out", "b"], d);
    let ma = fs::read(d.join("a/manifest.csv")).unwrap();
    assert_eq!(ma, fs::read(d.join("b/manifest.csv")).unwrap());
    for r in read_manifest(&d.join("a/manifest.csv")).unwrap() {
        assert_eq!(fs::read(d.join("a").join(&r.path)).unwrap(), fs::read(d.join("b").join(&r.path)).unwrap());
    }
    let spectra = load_dataset(&d.join("a/manifest.csv"), &synth_grid(16)).unwrap();
    assert!(spectra.iter().all(|s| s.validate(16).is_ok()));

    // the written dataset drives an experiment through the manifest source
    let (head, rest) = TINY.split_once("[data]").unwrap();
    let arch = &rest[rest.find("[arch]").unwrap()..];
    let data = "[data]\nsource = \"manifest\"\nmanifest = \"a/manifest.csv\"\ngrid = { min = 100.0, max = 4000.0, length = 16 }\n\n";
    fs::write(d.join("m.toml"), format!("{head}{data}{arch}")).unwrap();
    let out = marrnet(&["prepare", "-c", "m.toml"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cmrruff_preset_has_360_classes() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["synth", "-c", "exp.toml", "--preset", "cmrruff-like", "--out", "c"], d);
    let classes: BTreeSet<u32> =
        read_manifest(&d.join("c/manifest.csv")).unwrap().into_iter().map(|r| r.class_id).collect();
    assert_eq!(classes.len(), 360);
}

#[test]
fn train_writes_one_checkpoint_per_replicate() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["train", "-c", "exp.toml", "--set", "split.replicates=[0,1,2,3,4]", "--set", "train.max_epochs=1"], d);
    let ckpts: BTreeSet<Vec<u8>> =
        (0..5).map(|r| fs::read(d.join(format!("out/replicate_{r}/best.ckpt"))).unwrap()).collect();
    assert_eq!(ckpts.len(), 5);
    assert!(d.join("out/config.toml").exists());
    let log = fs::read_to_string(d.join("out/replicate_3/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn interrupted_training_resumes_to_identical_parameters() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["train", "-c", "exp.toml", "--set", "output_dir=whole"], d);
    let out = ok(&["train", "-c", "exp.toml", "--set", "output_dir=parts", "--stop-after", "1"], d);
    assert!(out.contains("stopped early"));
    assert!(!d.join("parts/replicate_0/final.ckpt").exists());
    ok(&["train", "-c", "exp.toml", "--set", "output_dir=parts", "--resume"], d);
    for f in ["final.ckpt", "best.ckpt", "state.bin", "train_log.jsonl"] {
        let a = fs::read(d.join("whole/replicate_0").join(f)).unwrap();
        let b = fs::read(d.join("parts/replicate_0").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn eval_aggregates_replicates_and_emits_table() {
    let (dir, _) = workspace();
    let d = dir.path();
    let reps = "split.replicates=[0,2,4]";
    ok(&["train", "-c", "exp.toml", "--set", reps], d);
    ok(&["eval", "-c", "exp.toml", "--set", reps], d);
    let per: Vec<ReplicateMetrics> = [0, 2, 4]
        .iter()
        .map(|r| serde_json::from_str(&fs::read_to_string(d.join(format!("out/replicate_{r}/metrics.json"))).unwrap()).unwrap())
        .collect();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("out/eval/summary.json")).unwrap()).unwrap();
    let averaged = &summary[2];
    assert_eq!(averaged["direction"], "averaged");
    let cols = averaged["columns"].as_array().unwrap();
    let names: Vec<&str> = cols.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["Recall@1", "Recall@3", "Recall@5", "mAP@1", "mAP@3", "mAP@5"]);
    for (c, (k, recall)) in cols.iter().zip([(1, true), (3, true), (5, true), (1, false), (3, false), (5, false)]) {
        let vals: Vec<f64> = per
            .iter()
            .map(|m| if recall { m.reports[2].recall_at[&k] } else { m.reports[2].map_at[&k] })
            .collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        assert!((c["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((c["std"].as_f64().unwrap() - sd).abs() < 1e-12);
    }
    let table = fs::read_to_string(d.join("out/eval/table.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert_eq!(header, "direction,statistic,Recall@1,Recall@3,Recall@5,mAP@1,mAP@3,mAP@5");
    assert_eq!(table.lines().count(), 1 + 3 * 2);
}

#[test]
fn occlude_emits_one_row_per_ratio_and_method() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["train", "-c", "exp.toml"], d);
    ok(&["occlude", "-c", "exp.toml", "--checkpoint", "final"], d);
    let csv = fs::read_to_string(d.join("out/replicate_0/occlusion.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("cross_modality,")).count(), 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("within_modality,")).count(), 4);
}

#[test]
fn gamma_sweep_single_point_and_reproducible_rows() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["gamma-sweep", "-c", "exp.toml", "--set", "train.max_epochs=1", "--point", "5"], d);
    let table = fs::read_to_string(d.join("out/sweep/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("5,0.01,0.0015,1,"));

    // the point's own config reproduces its checkpoint
    let point = d.join("out/sweep/point_5");
    let before = fs::read(point.join("replicate_0/best.ckpt")).unwrap();
    let cfg = point.join("config.toml").display().to_string();
    ok(&["train", "-c", &cfg, "--set", "output_dir=rerun"], d);
    assert_eq!(fs::read(d.join("rerun/replicate_0/best.ckpt")).unwrap(), before);
}

#[test]
fn gamma_sweep_full_grid_runs_at_toy_scale() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(&["gamma-sweep", "-c", "exp.toml", "--set", "train.max_epochs=1", "--set", "train.steps_per_epoch=1"], d);
    let table = fs::read_to_string(d.join("out/sweep/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 9);
}

#[test]
fn failures_exit_nonzero_with_json_record() {
    let (dir, _) = workspace();
    let d = dir.path();
    let out = marrnet(&["train", "-c", "exp.toml", "--set", "data.length=32"], d);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    let out = marrnet(&["eval", "-c", "exp.toml"], d);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "missing_artifact");
    let out = marrnet(&["prepare", "-c", "nope.toml"], d);
    assert!(!out.status.success());
}
