use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use htcl_core::checkpoint::load_checkpoint;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/tiny.toml");

fn htcl(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htcl"))
        .env("HTCL_CACHE_DIR", cache)
        .args(args)
        .output()
        .expect("spawn htcl")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

#[test]
fn end_to_end_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cache = d.join("cache");
    let data = d.join("data");
    let (s1, s2) = (d.join("s1"), d.join("s2"));

    ok(htcl(&cache, &["--config", TINY, "gen-data", "--out", s(&data)]));
    for f in ["manifest.tsv", "songs.json", "prefs/triplets.tsv", "prefs/analysis_positive.tsv"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    ok(htcl(&cache, &["--config", TINY, "pretrain", "--data", s(&data), "--out", s(&s1)]));
    let ck1 = s1.join("checkpoint.htcl");
    assert!(ck1.is_file());
    let m = json(s1.join("run_manifest.json"));
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["artifact_hashes"][s(&ck1)].as_str().map(str::len), Some(64));

    ok(htcl(
        &cache,
        &["--config", TINY, "finetune", "--data", s(&data), "--init", s(&ck1), "--out", s(&s2), "--ablation", "none"],
    ));
    let ck2 = s2.join("checkpoint.htcl");
    let s3 = d.join("s3");
    ok(htcl(
        &cache,
        &["--config", TINY, "finetune", "--data", s(&data), "--init", s(&ck1), "--out", s(&s3), "--ablation", "cf_pairs"],
    ));
    assert_eq!(json(s3.join("run_manifest.json"))["config"]["finetune"]["ablation"], "cf_pairs");
    let log = std::fs::read_to_string(s2.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report = d.join("report.json");
    let stdout = ok(htcl(
        &cache,
        &["--config", TINY, "eval", "--checkpoint", s(&ck2), "--data", s(&data), "--report", s(&report)],
    ));
    assert!(stdout.contains("acc_genre"));
    let r = json(report);
    for k in ["acc_genre", "acc_language", "hr_at_10", "ctr_auc", "cvr_auc"] {
        let v = r["metrics"][k].as_f64().unwrap_or_else(|| panic!("no {k}"));
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert!(d.join("report.manifest.json").is_file());

    let an = d.join("analysis");
    ok(htcl(
        &cache,
        &[
            "--config",
            TINY,
            "analyze",
            "--checkpoint",
            s(&ck2),
            "--baseline",
            s(&ck1),
            "--mode",
            "compare",
            "--pairs",
            s(&data.join("prefs")),
            "--data",
            s(&data),
            "--out",
            s(&an),
        ],
    ));
    let sep = json(an.join("separation.json"));
    assert!(sep["delta_separation_auc"].is_number());
    for f in ["checkpoint_positive.csv", "checkpoint_negative.csv", "baseline_positive.csv"] {
        let body = std::fs::read_to_string(an.join(f)).unwrap();
        assert!(body.starts_with("bin_center,count"), "{f}");
    }

    // Same config and seed reproduce the same weights; only wall-clock timings may differ.
    let again = d.join("s1b");
    ok(htcl(&cache, &["--config", TINY, "pretrain", "--data", s(&data), "--out", s(&again)]));
    let a = load_checkpoint(&ck1).unwrap();
    let b = load_checkpoint(&again.join("checkpoint.htcl")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optim, b.optim);
    let totals = |c: &htcl_core::checkpoint::CheckpointBundle| c.meta.history.iter().map(|r| r.total).collect::<Vec<_>>();
    assert_eq!(totals(&a), totals(&b));
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = htcl(dir.path(), &["eval", "--data", s(dir.path()), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = htcl(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            s(&dir.path().join("nope.htcl")),
            "--data",
            s(dir.path()),
            "--report",
            s(&dir.path().join("r.json")),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn misspelled_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model.loss]\ntemprature = 0.1\n").unwrap();
    let out = htcl(dir.path(), &["--config", s(&cfg), "gen-data", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temprature"));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cache = d.join("cache");
    let data = d.join("data");
    ok(htcl(&cache, &["--config", TINY, "gen-data", "--out", s(&data)]));
    let bad = d.join("bad.htcl");
    std::fs::write(&bad, b"HTCL\x01\x00\x00\x00garbage").unwrap();
    let out = htcl(
        &cache,
        &["--config", TINY, "eval", "--checkpoint", s(&bad), "--data", s(&data), "--report", s(&d.join("r.json"))],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
