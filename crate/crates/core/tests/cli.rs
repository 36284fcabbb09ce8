use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbtm_core::cli::RunConfig;
use dbtm_core::dynamics::{load_slice, read_manifest, write_manifest};
use dbtm_core::synthetic::{generate_stream, stream_records, StreamSpec};

const YEAR: i64 = 365 * 24 * 3600;

fn dbtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbtm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DBTM_SEED")
        .output()
        .unwrap()
}

fn write_reviews(path: &Path) {
    let stream = generate_stream(&StreamSpec {
        brands: 6,
        slices: 3,
        docs_per_slice: 150,
        validation_docs: 30,
        test_docs: 10,
        vocab: 90,
        topics: 3,
        topic_words: 10,
        polarity_words: 4,
        mean_length: 15.0,
        seed: 2,
        ..StreamSpec::default()
    })
    .unwrap();
    let mut out = String::new();
    for r in stream_records(&stream) {
        let line = serde_json::json!({
            "review_id": r.review_id, "brand": r.brand, "rating": r.rating, "ts": r.timestamp, "text": r.text,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(path, out).unwrap();
}

/// Config file in `dir` for a tiny three-slice run.
fn setup(dir: &Path) -> PathBuf {
    write_reviews(&dir.join("reviews.jsonl"));
    let cfg = serde_json::json!({
        "output_dir": "out",
        "corpus": {
            "input": "reviews.jsonl",
            "boundaries": [0, YEAR, 2 * YEAR, 3 * YEAR],
            "vocabulary": { "min_df": 2, "max_df_frac": 0.9, "ngram_max": 1 },
            "split_seed": 5
        },
        "model": {
            "topics": 3,
            "cavi": { "max_iters": 20 },
            "optimizer": { "batch_size": 32, "max_steps": 20 },
            "transition": { "checkpoint_interval": 10 },
            "seed": 1
        }
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = dbtm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    assert_eq!(dbtm(&[]).status.code(), Some(2));
    assert_eq!(dbtm(&["train", "--mode", "nope"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"corpus": {"input": "does-not-exist.jsonl"}}"#).unwrap();
    let out = dbtm(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist.jsonl"));

    let out = dbtm(&["ingest", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn ingest_train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = setup(dir.path());
    let cfg_arg = cfg_path.to_str().unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();

    run_ok(&["ingest", "--config", cfg_arg]);
    let corpus = cfg.corpus_dir();
    for t in 0..3 {
        for f in ["docs.jsonl", "counts.mtx", "split.json"] {
            assert!(corpus.join(format!("slice_{t:03}")).join(f).exists());
        }
    }
    assert!(!corpus.join("slice_003").exists());
    let before = snapshot(&corpus);
    run_ok(&["ingest", "--config", cfg_arg]);
    assert_eq!(before, snapshot(&corpus), "ingest is not reproducible");

    run_ok(&["train", "--config", cfg_arg]);
    let run = cfg.run_dir().unwrap();
    assert!(run.join("config.json").exists() && run.join("config.sha256").exists());
    let timings = fs::read_to_string(run.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 4);
    let tl_dir = run.join("timeline");
    let full = read_manifest(&tl_dir, None).unwrap().unwrap();
    assert_eq!(full.len(), 3);

    // Simulate an interruption after slice 1, then rerun.
    let mut cut = full.clone();
    cut.slices.truncate(2);
    cut.meta.gamma_history.truncate(3);
    cut.meta.rho_history.truncate(2);
    cut.meta.phi_history.truncate(2);
    fs::remove_file(tl_dir.join("slice_002.ckpt")).unwrap();
    write_manifest(&tl_dir, &cut).unwrap();
    let kept: Vec<Vec<u8>> = (0..2)
        .map(|t| fs::read(tl_dir.join(format!("slice_{t:03}.ckpt"))).unwrap())
        .collect();
    run_ok(&["train", "--config", cfg_arg]);
    for (t, bytes) in kept.iter().enumerate() {
        assert_eq!(&fs::read(tl_dir.join(format!("slice_{t:03}.ckpt"))).unwrap(), bytes);
    }
    let (resumed, _, _) = load_slice(&tl_dir.join("slice_002.ckpt"), None).unwrap();
    assert_eq!(resumed.state, full.slices[2].state);
    assert_eq!(resumed.scores, full.slices[2].scores);

    let csv = run_ok(&["eval", "--config", cfg_arg]);
    let lines: Vec<&str> = csv.lines().collect();
    // header, T - 1 rows, average
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines[3].starts_with("average,"));
    for line in &lines[1..] {
        let f: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert!((f[2] - f[1] / f[0].abs()).abs() < 1e-5, "{line}");
    }
    let eval_dir = run.join("eval");
    assert!(eval_dir.join("metrics.json").exists() && eval_dir.join("topics_002.json").exists());
    let series = fs::read_to_string(eval_dir.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 6 * 3);

    let same = run_ok(&["eval", "--config", cfg_arg, "--same-slice"]);
    assert_eq!(same.lines().count(), 1 + 3 + 1);

    let out = dbtm(&["report", "--config", cfg_arg, "--brand", "nobody"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("brand00") && err.contains("brand05"), "{err}");

    let files = run_ok(&["report", "--config", cfg_arg, "--brand", "brand01"]);
    let series_path = PathBuf::from(files.lines().next().unwrap());
    let first = fs::read(&series_path).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 1 + 3);
    let grid = fs::read_to_string(run.join("report").join("topics_000.txt")).unwrap();
    assert_eq!(grid.lines().count(), 3 * (1 + 5));
    run_ok(&["report", "--config", cfg_arg, "--brand", "brand01"]);
    assert_eq!(fs::read(&series_path).unwrap(), first);
}

#[test]
fn mode_and_ablation_flags_select_their_own_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = setup(dir.path());
    let cfg_arg = cfg_path.to_str().unwrap();
    run_ok(&["ingest", "--config", cfg_arg]);
    run_ok(&["train", "--config", cfg_arg, "--no-meta", "--mode", "o_dbtm"]);
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    assert!(!cfg.run_dir().unwrap().exists());
    cfg.model.no_meta = true;
    cfg.model.mode = dbtm_core::dynamics::Mode::ODbtm;
    let tl = read_manifest(&cfg.run_dir().unwrap().join("timeline"), None)
        .unwrap()
        .unwrap();
    assert_eq!(tl.len(), 3);
    assert!(tl.meta.gamma_history.iter().all(|&g| g == 0.0));
    assert!(tl.config.no_meta);

    // --fresh retrains from scratch; identical seeds give identical slices.
    run_ok(&["train", "--config", cfg_arg, "--no-meta", "--mode", "o_dbtm", "--fresh"]);
    let again = read_manifest(&cfg.run_dir().unwrap().join("timeline"), None)
        .unwrap()
        .unwrap();
    for (a, b) in tl.slices.iter().zip(&again.slices) {
        assert_eq!(a.state, b.state);
    }
}
