use std::path::Path;
use std::process::{Command, Output};

use relkit::checkpoint::Checkpoint;
use relkit::config::ExperimentConfig;

fn relkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("RELKIT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"seed = 1
[data]
test = "test.jsonl"
feature_dim = 4
word_dim = 4
[model]
gcn_hidden = 5
[model.irt]
depth = 1
model_dim = 6
label_embed_dim = 3
box_embed_dim = 3
[transe]
dim = 8
epochs = 10
[optimizer]
max_epochs = 3
"#;

/// Synthetic corpus plus a small config named `small.toml`.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = relkit(&["synth", "--out", ".", "--images", "12", "--test-images", "6"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn unknown_command_exits_2_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = relkit(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn invalid_config_exits_1_naming_the_field() {
    let dir = fixture();
    std::fs::write(dir.path().join("bad.toml"), "[optimizer]\nbatch_size = 0\n").unwrap();
    let o = relkit(&["train", "--config", "bad.toml", "--out", "ck.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("optimizer"), "{}", stderr(&o));

    std::fs::write(dir.path().join("missing.toml"), "[data]\ntrain = \"nope.jsonl\"\n").unwrap();
    let o = relkit(&["sample-oneshot", "--config", "missing.toml", "--out", "s.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.train"), "{}", stderr(&o));
}

#[test]
fn sgdet_is_rejected() {
    let dir = fixture();
    let o = relkit(
        &["eval", "--config", "small.toml", "--checkpoint", "ck.bin", "--setup", "SGDet"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SGDet requires an object detector (out of scope)"));
}

#[test]
fn sample_oneshot_keeps_one_of_three_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("vocab.json"),
        r#"{"object_classes": ["dog", "frisbee"], "predicate_classes": ["catching"]}"#,
    )
    .unwrap();
    let line = |id: &str| {
        format!(
            r#"{{"image_id": "{id}", "width": 100, "height": 100, "instances": [{{"class": 0, "box": [0, 0, 40, 40]}}, {{"class": 1, "box": [50, 50, 60, 60]}}], "triplets": [{{"sub": 0, "pred": 0, "obj": 1}}]}}"#
        )
    };
    std::fs::write(p.join("train.jsonl"), [line("a"), line("b"), line("c")].join("\n")).unwrap();
    std::fs::write(p.join("c.toml"), "").unwrap();
    std::fs::write(p.join("concepts.tsv"), "").unwrap();
    let o = relkit(&["sample-oneshot", "--config", "c.toml", "--out", "split.jsonl"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = std::fs::read_to_string(p.join("split.jsonl")).unwrap();
    assert_eq!(out.lines().count(), 1);
    assert!(out.contains(r#""image_id":"a""#), "{out}");
}

#[test]
fn train_and_eval_are_deterministic_and_resumable() {
    let dir = fixture();
    let p = dir.path();
    for ck in ["a.bin", "b.bin"] {
        let o = relkit(&["train", "--config", "small.toml", "--out", ck], p);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(p.join("a.bin")).unwrap(), std::fs::read(p.join("b.bin")).unwrap());
    for (ck, m) in [("a.bin", "a.json"), ("b.bin", "b.json")] {
        let o = relkit(
            &["eval", "--config", "small.toml", "--checkpoint", ck, "--out", m],
            p,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("PredCls"));
    }
    let a = std::fs::read(p.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["model"]["setups"]["SGCls"]["recall"]["20"].is_number());

    let o = relkit(&["train", "--config", "small.toml", "--out", "half.bin", "--epochs", "1"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = relkit(
        &["train", "--config", "small.toml", "--out", "resumed.bin", "--resume", "half.bin"],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(p.join("a.bin")).unwrap(), std::fs::read(p.join("resumed.bin")).unwrap());
}

fn checkpoint_seed(path: &Path) -> u64 {
    let ck = Checkpoint::load(path).unwrap();
    ExperimentConfig::from_toml(&ck.config).unwrap().seed
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = fixture();
    let p = dir.path();
    let run = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_relkit"));
        cmd.args(["train", "--config", "small.toml", "--epochs", "0", "--out", out])
            .args(extra)
            .current_dir(p)
            .env_remove("RELKIT_SEED")
            .env("RUST_LOG", "warn");
        if let Some(s) = env {
            cmd.env("RELKIT_SEED", s);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        checkpoint_seed(&p.join(out))
    };
    assert_eq!(run(&[], None, "c.bin"), 1);
    assert_eq!(run(&[], Some("7"), "e.bin"), 7);
    assert_eq!(run(&["--seed", "9"], Some("7"), "f.bin"), 9);

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_relkit"));
    let o = cmd
        .args(["train", "--config", "small.toml", "--out", "x.bin"])
        .current_dir(p)
        .env("RELKIT_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("RELKIT_SEED"));
}

#[test]
fn gradcheck_exit_status_matches_reported_error() {
    let dir = fixture();
    for seed in ["1", "2"] {
        let o = relkit(&["gradcheck", "--config", "small.toml", "--seed", seed], dir.path());
        let out = stdout(&o);
        let err: f64 = out
            .split_whitespace()
            .nth(3)
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| panic!("unexpected output {out:?}"));
        assert_eq!(o.status.success(), err < 1e-4, "{out}");
    }
}

#[test]
fn knowledge_commands_emit_json() {
    let dir = fixture();
    let o = relkit(&["build-kg", "--config", "small.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["relational"]["categories"].as_array().unwrap().len() > 8);
    assert!(!v["commonsense"]["edges"].as_array().unwrap().is_empty());

    let o = relkit(
        &["mine-paths", "--config", "small.toml", "--labels", "person,dog,cup", "--threshold", "0.05"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for path in v["paths"].as_array().unwrap() {
        assert!(path["score"].as_f64().unwrap() >= 0.05);
    }

    let o = relkit(
        &["mine-paths", "--config", "small.toml", "--labels", "person,dog", "--threshold", "1.5"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("threshold"));
}
