use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use gen4d::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use sha2::{Digest, Sha256};

fn gen4d(root: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["gen4d", "--root", root.to_str().unwrap()];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn ok(root: &Path, args: &[&str]) -> String {
    let (code, out, err) = gen4d(root, args);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    out
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let hash = Sha256::digest(std::fs::read(&p).unwrap());
                out.insert(rel, hash.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

/// prompts → avatar → animate → render → compose → export → validate → eval.
fn staged_pipeline(root: &Path, threads: &str) {
    let t = ["--threads", threads, "--seed", "5"];
    let with =
        |args: &[&str]| -> Vec<String> { args.iter().chain(&t).map(|s| s.to_string()).collect() };
    let run_ok = |args: &[&str]| {
        let a = with(args);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        ok(root, &refs)
    };
    run_ok(&["prompts", "--count", "4", "--out", "prompts.jsonl"]);
    for i in ["0", "1"] {
        let out = format!("avatar{i}.json");
        run_ok(&[
            "avatar",
            "--prompts",
            "prompts.jsonl",
            "--index",
            i,
            "--out",
            &out,
            "--gaussians",
            "150",
            "--iterations",
            "3",
            "--resolution",
            "24",
        ]);
    }
    let clips = [
        ("avatar0.json", "subject00", "batting"),
        ("avatar1.json", "subject01", "kicking"),
    ];
    for (avatar, subject, action) in clips {
        let dir = format!("work/{subject}_{action}");
        run_ok(&[
            "animate",
            "--avatar",
            avatar,
            "--clip-dir",
            &dir,
            "--action",
            action,
            "--subject",
            subject,
            "--frames",
            "3",
        ]);
        run_ok(&["render", "--clip-dir", &dir, "--resolution", "48"]);
        run_ok(&["compose", "--clip-dir", &dir]);
    }
    run_ok(&[
        "export",
        "--clip-dir",
        "work/subject00_batting",
        "--clip-dir",
        "work/subject01_kicking",
        "--out",
        "data",
        "--sport",
        "baseball",
    ]);
    let report = run_ok(&["validate", "--dataset", "data"]);
    assert!(report.contains("0 violations"), "{report}");
}

#[test]
fn staged_commands_are_deterministic_across_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    staged_pipeline(a.path(), "1");
    staged_pipeline(b.path(), "3");
    let (da, db) = (tree_digest(a.path()), tree_digest(b.path()));
    assert!(da.contains_key("data/manifest.json"));
    assert!(da.contains_key("prompts.jsonl.config.json"));
    assert_eq!(da, db);
}

#[test]
fn demo_validate_and_self_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(
        root,
        &[
            "demo",
            "--seed",
            "7",
            "--frames",
            "4",
            "--resolution",
            "48",
            "--out",
            "demo",
        ],
    );
    let report = ok(root, &["validate", "--dataset", "demo", "--json"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
    ok(
        root,
        &[
            "eval",
            "--dataset",
            "demo",
            "--dump-groundtruth",
            "gt_as_pred.jsonl",
        ],
    );
    let table = ok(
        root,
        &["eval", "--dataset", "demo", "--pred", "gt_as_pred.jsonl"],
    );
    assert!(table.contains("100.0/100.0/100.0"), "{table}");
    let json = ok(
        root,
        &[
            "eval",
            "--dataset",
            "demo",
            "--pred",
            "gt_as_pred.jsonl",
            "--json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["ap"], serde_json::json!([100.0, 100.0, 100.0]));
}

#[test]
fn validation_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(
        root,
        &["demo", "--frames", "2", "--resolution", "32", "--out", "d"],
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("d/manifest.json")).unwrap())
            .unwrap();
    let clip = manifest["splits"]["test"]["clips"][0]["clip_id"]
        .as_str()
        .unwrap();
    std::fs::remove_file(root.join(format!("d/test/{clip}/frames/000001.png"))).unwrap();
    let (code, out, _) = gen4d(root, &["validate", "--dataset", "d"]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(out.contains("missing"), "{out}");
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(gen4d(root, &["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(
        gen4d(root, &["--config", "missing.json", "prompts"]).0,
        EXIT_CONFIG
    );
    std::fs::write(root.join("bad.json"), r#"{"body_model": "nowhere.json"}"#).unwrap();
    assert_eq!(
        gen4d(root, &["--config", "bad.json", "prompts"]).0,
        EXIT_CONFIG
    );
    assert_eq!(
        gen4d(root, &["validate", "--dataset", "nothing"]).0,
        EXIT_CONFIG
    );
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("cfg.json"), r#"{"seed": 3, "threads": 2}"#).unwrap();
    ok(
        root,
        &[
            "--config", "cfg.json", "--seed", "11", "prompts", "--count", "2", "--out", "p.jsonl",
        ],
    );
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("p.jsonl.config.json")).unwrap())
            .unwrap();
    assert_eq!(echo["seed"], 11);
    assert!(echo.get("threads").is_none());
}

#[test]
fn every_command_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        "prompts", "avatar", "animate", "render", "compose", "export", "validate", "eval", "demo",
    ] {
        let (code, out, _) = gen4d(dir.path(), &[cmd, "--help"]);
        assert_eq!(code, EXIT_OK, "{cmd}");
        assert!(
            out.contains("--seed") && out.contains("--threads"),
            "{cmd}: {out}"
        );
    }
}

#[test]
fn external_denoiser_matches_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["prompts", "--count", "1", "--out", "p.jsonl"]);
    let common = [
        "avatar",
        "--prompts",
        "p.jsonl",
        "--gaussians",
        "60",
        "--iterations",
        "2",
        "--resolution",
        "16",
    ];
    let mut local: Vec<&str> = common.to_vec();
    local.extend(["--mock", "perfect", "--out", "local.json"]);
    ok(root, &local);
    let server = format!(
        "{} mock-denoiser --mode {{\"mode\":\"perfect\"}}",
        env!("CARGO_BIN_EXE_gen4d")
    );
    let mut ext: Vec<&str> = common.to_vec();
    ext.extend([
        "--denoiser",
        "external",
        "--denoiser-cmd",
        &server,
        "--out",
        "ext.json",
    ]);
    ok(root, &ext);
    assert_eq!(
        std::fs::read(root.join("local.json")).unwrap(),
        std::fs::read(root.join("ext.json")).unwrap()
    );
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gen4d");
    let status = Command::new(bin).arg("nope").output().unwrap().status;
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args([
            "--root",
            dir.path().to_str().unwrap(),
            "validate",
            "--dataset",
            "x",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
}
