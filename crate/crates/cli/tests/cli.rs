use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use sckan_cli::grid::{GridReport, REPORT_CSV_HEADER};
use sckan_core::data::{Role, SplitManifest};

fn sckan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sckan")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, seed: u64, count: usize) {
    let o = sckan(&[
        "gen-data",
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--shape",
        "16",
        "--labeled-fraction",
        "0.25",
        "--test-fraction",
        "0.25",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn write_config(path: &Path, corpus: &Path, run_dir: &Path, dataset_seed: u64, steps: usize, extra: &str) {
    let text = format!(
        r#"{{"corpus": {:?}, "run_dir": {:?}, "labeled_fraction": 0.25, "test_fraction": 0.25, "dataset_seed": {dataset_seed},
            "steps": {steps}, "crop_size": [8, 8, 8], "labeled_per_batch": 2, "unlabeled_per_batch": 2{extra}}}"#,
        corpus.to_str().unwrap(),
        run_dir.to_str().unwrap()
    );
    fs::write(path, text).unwrap();
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = sckan(&["gen-data", "--seed", "7", "--count", "20", "--shape", "24", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".sckv")).count(), 40);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let m: SplitManifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.entries.len(), 20);
    let mut ids: Vec<usize> = [Role::Labeled, Role::Unlabeled, Role::Test].iter().flat_map(|&r| m.ids(r)).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..20).collect::<Vec<_>>());
    assert_eq!((m.ids(Role::Labeled).len(), m.ids(Role::Test).len()), (2, 3));
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen(&corpus, 1, 6);
    let cfg = tmp.path().join("c.json");
    let run = tmp.path().join("run");

    write_config(&cfg, &corpus, &run, 1, 4, r#", "lerning_rate": 0.1"#);
    let o = sckan(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));

    write_config(&cfg, &corpus, &run, 1, 4, r#", "tau": -1"#);
    let o = sckan(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`tau`"), "{}", stderr(&o));

    write_config(&cfg, &corpus, &run, 99, 4, "");
    let o = sckan(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset_seed"));

    write_config(&cfg, &tmp.path().join("nowhere"), &run, 1, 4, "");
    assert_eq!(code(&sckan(&["train", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&sckan(&["train"])), 2);
    assert!(!run.exists(), "nothing may be written for a rejected config");
}

#[test]
fn train_eval_and_rerun_reproduce_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen(&corpus, 1, 6);
    let cfg = tmp.path().join("c.json");
    let run = tmp.path().join("run");
    write_config(&cfg, &corpus, &run, 1, 4, "");
    let o = sckan(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "train_log.jsonl", "metrics.json", "model.sckp"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 4);

    let again = tmp.path().join("again");
    let o = sckan(&["train", "--config", run.join("config.json").to_str().unwrap(), "--run-dir", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["train_log.jsonl", "metrics.json", "model.sckp"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f} differs");
    }

    let o = sckan(&["eval", "--run-dir", run.to_str().unwrap(), "--split", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["cases"], 6);
    assert_eq!(eval["units"], "voxel");
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen(&corpus, 2, 6);
    let cfg = tmp.path().join("c.json");
    write_config(&cfg, &corpus, &tmp.path().join("run"), 2, 20, r#", "lr": 1e300"#);
    let o = sckan(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite") || stderr(&o).contains("numerical"), "{}", stderr(&o));
}

#[test]
fn gradcheck_kan_passes_quickly_and_catches_a_corrupted_rule() {
    let t = Instant::now();
    let o = sckan(&["gradcheck", "--module", "kan"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(t.elapsed().as_secs() < 60);

    let o = Command::new(env!("CARGO_BIN_EXE_sckan"))
        .args(["gradcheck", "--module", "pcc", "--seeds", "3"])
        .env("SCKAN_CORRUPT_BACKWARD", "exp")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("pcc::contrastive"), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL pcc::contrastive"));
}

#[test]
fn ablate_runs_cells_and_emits_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen(&corpus, 3, 6);
    let grid = tmp.path().join("grid.json");
    fs::write(
        &grid,
        format!(
            r#"{{"name": "fusion", "base": {{"corpus": {:?}, "dataset_seed": 3, "labeled_fraction": 0.25, "test_fraction": 0.25, "steps": 2,
                "crop_size": [8, 8, 8], "labeled_per_batch": 2, "unlabeled_per_batch": 2}},
              "seeds": [0, 1],
              "cells": [{{"label": "average", "set": {{"fusion_strategy": "average"}}}},
                        {{"label": "kan", "set": {{"fusion_strategy": "kan"}}}}]}}"#,
            corpus.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = sckan(&["ablate", "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_CSV_HEADER);
    assert_eq!(csv.lines().count(), 3);
    let report: GridReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert!(report.cells.iter().all(|c| c.failed == 0 && c.dice.is_some_and(|d| d.n == 2)));
    assert!(fs::read_to_string(out.join("report.md")).unwrap().contains("| kan |"));
    assert!(out.join("runs/kan/seed_1/metrics.json").is_file());

    fs::write(&grid, r#"{"base": {}, "seeds": [0], "cells": []}"#).unwrap();
    let o = sckan(&["ablate", "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
