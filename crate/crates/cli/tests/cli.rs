use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfm")).current_dir(dir).args(args).output().expect("spawn hfm")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<Value> {
    let out = hfm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn error_kind(dir: &Path, args: &[&str]) -> String {
    let out = hfm(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    line["error"]["kind"].as_str().unwrap().to_string()
}

/// Synthetic fire data: 16 scenes over 2020–2024, tiled, collocated and split.
fn fire_manifest(dir: &Path) {
    ok(dir, &["synth", "--out", "raw", "--scenes", "16"]);
    ok(dir, &["tile", "--scenes", "raw/scenes", "--out", "tiles", "--drop-full-cloud"]);
    ok(dir, &["tile", "--scenes", "raw/labels", "--out", "labels"]);
    let c = ok(dir, &["collocate", "--images", "tiles", "--labels", "labels", "--out", "fire.tsv"]);
    assert_eq!(c[0]["unmatched"], 0);
    ok(dir, &["split", "--manifest", "fire.tsv"]);
}

const TINY: &[&str] = &["--dim", "16", "--depth", "1", "--heads", "2", "--decoder-channels", "4,4", "--batch", "16"];

#[test]
fn finetune_then_eval_from_scratch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fire_manifest(dir);
    let mut args = vec!["finetune", "--data", "fire.tsv", "--w-pos", "1000", "--epochs", "2", "--out", "ft.ckpt"];
    args.extend(TINY);
    let history = ok(dir, &args);
    assert_eq!(history.len(), 2);
    assert_eq!(history[1]["epoch"], 2);

    let report = ok(dir, &["eval", "--ckpt", "ft.ckpt", "--data", "fire.tsv", "--split", "test", "--report", "r.json"]);
    let cm = &report[0]["confusion"];
    let pixels: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| cm[*k].as_u64().unwrap()).sum();
    assert_eq!(pixels, report[0]["samples"].as_u64().unwrap() * 32 * 32);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(saved, report[0]);
}

#[test]
fn pretrained_encoder_feeds_finetuning() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fire_manifest(dir);
    ok(dir, &["synth", "--out", "praw", "--scenes", "8", "--first-year", "2014", "--last-year", "2018"]);
    ok(dir, &["tile", "--scenes", "praw/scenes", "--out", "ptiles"]);
    ok(dir, &["collocate", "--images", "ptiles", "--out", "pre.tsv"]);
    ok(dir, &["split", "--manifest", "pre.tsv", "--pretrain-years", "2014-2018"]);
    let mut args = vec!["pretrain", "--data", "pre.tsv", "--max-steps", "3", "--decoder-dim", "8", "--decoder-depth", "1"];
    args.extend(["--decoder-heads", "1", "--out", "pre.ckpt"]);
    args.extend(TINY.iter().filter(|a| !a.contains(',') && **a != "--decoder-channels"));
    let losses = ok(dir, &args);
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| l["loss"].as_f64().unwrap().is_finite()));

    let h = ok(dir, &["finetune", "--data", "fire.tsv", "--ckpt", "pre.ckpt", "--epochs", "1", "--decoder-channels", "4,4", "--out", "ft.ckpt"]);
    assert_eq!(h.len(), 1);
}

#[test]
fn split_rules_file_and_uncovered_years() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fire_manifest(dir);
    std::fs::write(dir.join("rules"), "train 2020-2021\n# no 2022\ntest 2023-2024\n").unwrap();
    assert_eq!(error_kind(dir, &["split", "--manifest", "fire.tsv", "--rules", "rules", "--out", "x.tsv"]), "uncovered_year");
    let r = ok(dir, &["split", "--manifest", "fire.tsv", "--rules", "rules", "--skip-uncovered", "--out", "x.tsv"]);
    let splits = r[0]["splits"].as_object().unwrap();
    assert!(!splits.contains_key("validation"));
    let text = std::fs::read_to_string(dir.join("x.tsv")).unwrap();
    assert!(text.lines().all(|l| !l.contains("\t2022\t")));
}

#[test]
fn failures_are_reported_as_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fire_manifest(dir);
    assert_eq!(error_kind(dir, &["eval", "--ckpt", "missing.ckpt", "--data", "fire.tsv"]), "io");
    std::fs::write(dir.join("bad.rules"), "train 2020-x\n").unwrap();
    assert_eq!(error_kind(dir, &["split", "--manifest", "fire.tsv", "--rules", "bad.rules"]), "malformed");
    std::fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(error_kind(dir, &["eval", "--ckpt", "junk.ckpt", "--data", "fire.tsv"]), "bad_magic");

    // Flip one byte of a referenced sample.
    let manifest = std::fs::read_to_string(dir.join("fire.tsv")).unwrap();
    let first = manifest.lines().find(|l| l.ends_with("\ttrain")).unwrap();
    let path = dir.join(first.split('\t').next().unwrap());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[100] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    let mut args = vec!["finetune", "--data", "fire.tsv", "--epochs", "1", "--out", "ft.ckpt"];
    args.extend(TINY);
    assert_eq!(error_kind(dir, &args), "digest_mismatch");
}

#[test]
fn gradcheck_reports_every_loss() {
    let dir = tempfile::tempdir().unwrap();
    let lines = ok(dir.path(), &["gradcheck", "--config", "toy", "--tol", "1e-4"]);
    let names: Vec<&str> = lines.iter().map(|l| l["check"].as_str().unwrap()).collect();
    assert_eq!(names, ["pretrain T=1", "pretrain T=3", "weighted_ce", "dice"]);
    assert!(lines.iter().all(|l| l["passed"] == true));
    assert_eq!(error_kind(dir.path(), &["gradcheck", "--tol", "1e-12"]), "gradcheck_failed");
}
