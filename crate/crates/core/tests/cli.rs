use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use portal::ingest::emit_csv;
use portal::synth;

const TINY: [&str; 8] = ["--set", "layers=1", "--set", "hidden=32", "--set", "heads=2", "--set", "text_dim=16"];

fn portal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_portal")).args(args).output().expect("run portal")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_table(path: &Path, table: &portal::ingest::Table) {
    emit_csv(&table.manifest, &table.rows, fs::File::create(path).unwrap()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn inspect_shows_the_encoding_breakdown() {
    let o = portal(&["inspect", "--value", "-6", "--type", "number"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["sign"], "negative");
    assert_eq!(v["alpha"], 1.5);
    assert_eq!(v["beta"], 2);
    assert_eq!(v["exponent_class"], 129);
    let bins = v["bin_weights"].as_array().unwrap();
    assert_eq!(bins.len(), 32);
    assert!((bins.iter().map(|b| b.as_f64().unwrap()).sum::<f64>() - 1.0).abs() < 1e-12);

    let o = portal(&["inspect", "--value", "1900-05-07", "--type", "date"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["year_index"], 0);
    assert_eq!(v["features"]["year"], 1900);

    let o = portal(&["inspect", "--value", "not a date", "--type", "date"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&portal(&[])), 1);
    assert_eq!(code(&portal(&["frobnicate"])), 1);
    assert_eq!(code(&portal(&["--help"])), 0);
    assert_eq!(code(&portal(&["inspect", "--value", "1"])), 1);
}

#[test]
fn data_errors_exit_with_two_and_leave_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ckpt");
    let o = portal(&["pretrain", "--data", s(&dir.path().join("nope")), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn config_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nseed = 3\nlearning_rate = 0.1\n").unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    let o = portal(&["pretrain", "--data", s(&data), "--out", s(&dir.path().join("m.ckpt")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = portal(&["pretrain", "--data", s(&data), "--out", "x", "--set", "preset=huge"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn finetune_rejects_bad_targets_and_codecs() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    write_table(&train, &synth::mixed_regression(20, 1));
    let out = dir.path().join("m.ckpt");
    let run = |extra: &[&str]| {
        let mut args = vec!["finetune", "--train", s(&train), "--out", s(&out)];
        args.extend_from_slice(extra);
        portal(&args)
    };
    let o = run(&["--target", "value", "--task", "reg", "--codec", "magic"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("scalar_L2") && stderr(&o).contains("power_tilde_XE"), "{}", stderr(&o));
    assert_eq!(code(&run(&["--target", "missing_column", "--task", "reg"])), 2);
    assert_eq!(code(&run(&["--target", "category", "--task", "reg"])), 2);
    assert!(!out.exists());
}

#[test]
fn bagged_finetune_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    let table = synth::mixed_regression(60, 2);
    write_table(&train, &table);
    write_table(&test, &synth::mixed_regression(20, 3));
    let before = fs::read(&train).unwrap();
    let out = dir.path().join("bag.ckpt");
    let mut args = vec!["finetune", "--train", s(&train), "--target", "value", "--task", "regression", "--out", s(&out)];
    args.extend_from_slice(&["--bag", "3", "--codec", "triplet_alpha_XE", "--seed", "10"]);
    args.extend_from_slice(&["--set", "finetune.max_epochs=2", "--set", "finetune.patience=2"]);
    args.extend_from_slice(&TINY);
    let o = portal(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&train).unwrap(), before, "input file was modified");

    let members: Vec<_> = (0..3).map(|i| dir.path().join(format!("bag.member-{i:02}.ckpt"))).collect();
    assert!(members.iter().all(|m| m.exists()));
    let metrics: Value = serde_json::from_slice(&fs::read(dir.path().join("bag.ckpt.metrics.json")).unwrap()).unwrap();
    let listed = metrics["members"].as_array().unwrap();
    assert_eq!(listed.len(), 3);
    let seeds: Vec<u64> = listed.iter().map(|m| m["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![10, 11, 12]);

    let predictions = dir.path().join("pred.csv");
    let report = dir.path().join("eval.json");
    let mut args = vec!["eval", "--test", s(&test), "--predictions", s(&predictions), "--metrics", s(&report)];
    for m in &members {
        args.extend_from_slice(&["--model", s(m)]);
    }
    let o = portal(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("r2 "), "{}", stdout(&o));
    let lines = fs::read_to_string(&predictions).unwrap();
    assert_eq!(lines.lines().count(), 21);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["metric"], "r2");
    assert!(r["ensemble"].as_f64().unwrap().is_finite());
    assert_eq!(r["members"].as_array().unwrap().len(), 3);

    // A test file without a trained column is a schema mismatch.
    let other = dir.path().join("other.csv");
    write_table(&other, &synth::linear_regression(5, 0.1, 1));
    let o = portal(&["eval", "--model", s(&members[0]), "--test", s(&other)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn resolved_config(err: &str) -> String {
    let mut lines = err.lines().skip_while(|l| *l != "# resolved config");
    lines.next();
    lines.take_while(|l| !l.is_empty()).map(|l| format!("{l}\n")).collect()
}

#[test]
fn a_run_is_reproducible_from_its_logged_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    for t in synth::dependent_corpus(3, 6, 4) {
        write_table(&data.join(format!("{}.csv", t.name)), &t);
    }
    let first = dir.path().join("a.ckpt");
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&first), "--seed", "9", "--set", "pretrain.epochs=2"];
    args.extend_from_slice(&TINY);
    let o = portal(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = fs::read(&first).unwrap();
    assert_eq!(&bytes[..8], b"PORTALCK");
    let log = fs::read_to_string(dir.path().join("a.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let cfg = dir.path().join("logged.cfg");
    fs::write(&cfg, resolved_config(&stderr(&o))).unwrap();
    let second = dir.path().join("b.ckpt");
    let o = portal(&["pretrain", "--data", s(&data), "--out", s(&second), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&second).unwrap(), bytes);
}

#[test]
fn embed_writes_a_file_cache() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("texts.txt");
    fs::write(&input, "porto\nlisbon\n\nporto\n").unwrap();
    let out = dir.path().join("cache.tsv");
    let o = portal(&["embed", "--input", s(&input), "--out", s(&out), "--dim", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dim=8"));
    let keys: Vec<&str> = lines.map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(keys, vec!["lisbon", "porto"]);
}

#[test]
fn eval_on_the_memorization_task_fits_the_training_rows() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("linear.csv");
    write_table(&train, &synth::linear_regression(64, 0.01, 3));
    let out = dir.path().join("m.ckpt");
    let o = portal(&[
        "finetune", "--train", s(&train), "--target", "y", "--task", "reg", "--out", s(&out), "--seed", "0",
        "--set", "finetune.valid_fraction=0", "--set", "finetune.max_epochs=200", "--set", "finetune.patience=200",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = portal(&["eval", "--model", s(&out), "--test", s(&train)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r2: f64 = stdout(&o).trim().strip_prefix("r2 ").unwrap().parse().unwrap();
    assert!(r2 >= 0.99, "train R² {r2}");
}
