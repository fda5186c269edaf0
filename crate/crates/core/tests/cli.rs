use std::path::Path;
use std::process::{Command, Output};

fn fftat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fftat"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FFTAT_PRECISION")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
name = "tiny"
out_dir = "runs"

[model]
image_side = 16
patch = 4
dim = 16
heads = 2
layers = 2
classes = 3

[train]
steps = 8
warmup_steps = 2
eval_every = 4
batch_size = 4
feature_fusion = true

[dataset]
n_per_class = 4
test_per_class = 2
"#;

#[test]
fn gradcheck_passes_and_catches_a_broken_softmax() {
    let dir = tempfile::tempdir().unwrap();
    let ok = fftat(&["gradcheck"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let text = stdout(&ok);
    for name in [
        "softmax",
        "layer_norm",
        "tg_sa",
        "tsa",
        "mutual_information",
        "end_to_end",
    ] {
        assert!(text.contains(name), "{name} missing from report");
    }
    let bad = fftat(&["gradcheck", "--inject-fault", "softmax"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    let text = stdout(&bad);
    let failed = text.lines().find(|l| l.starts_with("FAILED")).unwrap();
    assert!(failed.contains("softmax"), "{failed}");
    assert!(text.lines().any(|l| l.starts_with("add ") && l.ends_with("ok")));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let out = fftat(
        &["train", "--config", "run.toml", "--set", "feature_fusion=false"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/tiny");
    for f in [
        "config.toml",
        "version.txt",
        "metrics.jsonl",
        "summary.csv",
        "graph_step4.csv",
        "graph_step8.csv",
        "ckpt_4.bin",
        "ckpt_8.bin",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let written = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("feature_fusion = false"), "override recorded");
    assert_eq!(
        std::fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        8
    );

    let eval = fftat(&["eval", "--run", "runs/tiny"], dir.path());
    assert_eq!(eval.status.code(), Some(0));
    let text = stdout(&eval);
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("target_acc: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(text.contains("step: 8"));

    let export = fftat(&["export-graph", "--run", "runs/tiny", "--out", "g.csv"], dir.path());
    assert_eq!(export.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(run.join("graph_step8.csv")).unwrap());
    assert!(stdout(&export).contains("scale:"));
    let from_ckpt = fftat(&["export-graph", "--checkpoint", "runs/tiny/ckpt_8.bin"], dir.path());
    assert_eq!(from_ckpt.status.code(), Some(0));

    let resumed = fftat(
        &[
            "train",
            "--config",
            "run.toml",
            "--set",
            "feature_fusion=false",
            "--set",
            "name=resumed",
            "--resume",
            "runs/tiny/ckpt_4.bin",
        ],
        dir.path(),
    );
    assert_eq!(
        resumed.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&resumed.stderr)
    );
    let tail: Vec<String> = std::fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .skip(4)
        .map(String::from)
        .collect();
    let again: Vec<String> = std::fs::read_to_string(dir.path().join("runs/resumed/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(tail, again);
}

#[test]
fn precision_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fftat"))
        .args([
            "train",
            "--config",
            "run.toml",
            "--set",
            "steps=2",
            "--set",
            "warmup_steps=1",
            "--set",
            "eval_every=2",
        ])
        .current_dir(dir.path())
        .env("FFTAT_PRECISION", "f64")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let cfg = std::fs::read_to_string(dir.path().join("runs/tiny/config.toml")).unwrap();
    assert!(cfg.contains("precision = \"f64\""));
    let bad = Command::new(env!("CARGO_BIN_EXE_fftat"))
        .args(["train", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("FFTAT_PRECISION", "f16")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = fftat(&["train", "--set", "stepz=3"], dir.path());
    assert_eq!(bad_key.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad_key.stderr);
    assert!(err.contains("train.steps"), "{err}");
    assert_eq!(fftat(&["eval", "--run", "missing"], dir.path()).status.code(), Some(1));
    assert_eq!(fftat(&["nonsense"], dir.path()).status.code(), Some(1));
    assert_eq!(
        fftat(&["train", "--config", "missing.toml"], dir.path()).status.code(),
        Some(1)
    );
    let folder = fftat(&["train", "--set", "dataset.kind=folder"], dir.path());
    assert_eq!(folder.status.code(), Some(1));
    assert_eq!(fftat(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn dataset_gen_writes_loadable_folders() {
    let dir = tempfile::tempdir().unwrap();
    let out = fftat(
        &[
            "dataset",
            "gen",
            "--seed",
            "3",
            "--out",
            "ds",
            "--n-per-class",
            "2",
            "--test-per-class",
            "1",
            "--classes",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    for split in ["source", "target", "source_test", "target_test"] {
        let set = fftat::data::load_folder(dir.path().join("ds").join(split), 32).unwrap();
        assert_eq!(set.classes(), 3);
    }
    let config = "[train]\nsteps = 2\nwarmup_steps = 1\nbatch_size = 4\n[model]\nclasses = 3\n[dataset]\nkind = \"folder\"\nsource = \"ds/source\"\ntarget = \"ds/target\"\ntarget_eval = \"ds/target_test\"\n";
    std::fs::write(dir.path().join("f.toml"), config).unwrap();
    let train = fftat(&["train", "--config", "f.toml"], dir.path());
    assert_eq!(
        train.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
}
