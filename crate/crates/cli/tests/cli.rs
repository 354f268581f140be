use std::path::{Path, PathBuf};

use lht_cli::commands::{
    cmd_sweep_lambda, cmd_train, CHECKPOINT_JSON, HIERARCHY_JSON, REPORT_JSON, SWEEP_CSV, TEST_CSV, TRAIN_CSV,
    VERIFY_JSONL,
};
use lht_cli::manifest::{Manifest, MANIFEST_FILE};
use lht_cli::{main_with_args, SweepArgs, TrainArgs, TrainFlags};
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("lht").chain(args.iter().copied()))
}

fn subdir(root: &TempDir, name: &str) -> PathBuf {
    let p = root.path().join(name);
    std::fs::create_dir(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small benchmark-shaped dataset so training tests stay fast.
fn small_data(root: &TempDir) -> PathBuf {
    let data = subdir(root, "data");
    let code = run(&[
        "gen-data",
        "--train-per-class",
        "20",
        "--test-per-class",
        "20",
        "--seed",
        "4",
        "--out",
        s(&data),
    ]);
    assert_eq!(code, 0);
    data
}

#[test]
fn gen_data_is_deterministic() {
    let root = TempDir::new().unwrap();
    let (a, b) = (subdir(&root, "a"), subdir(&root, "b"));
    assert_eq!(run(&["gen-data", "--seed", "9", "--out", s(&a)]), 0);
    assert_eq!(run(&["gen-data", "--seed", "9", "--out", s(&b)]), 0);
    for name in [TRAIN_CSV, TEST_CSV, HIERARCHY_JSON] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = subdir(&root, "c");
    assert_eq!(run(&["gen-data", "--seed", "10", "--out", s(&c)]), 0);
    assert_ne!(
        std::fs::read(a.join(TRAIN_CSV)).unwrap(),
        std::fs::read(c.join(TRAIN_CSV)).unwrap()
    );
}

#[test]
fn manifest_records_digests_and_replays_exactly() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let manifest = Manifest::load(&data.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert_eq!(manifest.outputs.len(), 3);
    assert!(manifest.outputs.iter().all(|d| d.sha256.len() == 64));

    let again = subdir(&root, "again");
    assert_eq!(
        run(&["replay", "--manifest", s(&data.join(MANIFEST_FILE)), "--out", s(&again)]),
        0
    );
    let replayed = Manifest::load(&again.join(MANIFEST_FILE)).unwrap();
    let digests = |m: &Manifest| m.outputs.iter().map(|d| d.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(digests(&manifest), digests(&replayed));
}

#[test]
fn replay_rejects_changed_inputs() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let out = subdir(&root, "train");
    assert_eq!(run(&["train", "--data", s(&data), "--steps", "5", "--out", s(&out)]), 0);
    let mut text = std::fs::read_to_string(data.join(TRAIN_CSV)).unwrap();
    text.push('\n');
    std::fs::write(data.join(TRAIN_CSV), text).unwrap();
    let again = subdir(&root, "again");
    assert_ne!(
        run(&["replay", "--manifest", s(&out.join(MANIFEST_FILE)), "--out", s(&again)]),
        0
    );
}

#[test]
fn train_writes_every_output() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let out = subdir(&root, "train");
    let outcome = cmd_train(&TrainArgs {
        flags: TrainFlags {
            data: Some(data),
            steps: Some(30),
            eval_every: Some(10),
            ..TrainFlags::default()
        },
        lambda: Some(2.0),
        seed: Some(1),
        out: out.clone(),
    })
    .unwrap();
    assert_eq!(outcome.history.records.len(), 30);
    assert_eq!(
        outcome
            .history
            .records
            .iter()
            .filter(|r| r.eval_avg_acc.is_some())
            .count(),
        3
    );
    let manifest = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.inputs.len(), 3);
    assert_eq!(manifest.outputs.len(), 5);
    for d in &manifest.outputs {
        assert!(out.join(&d.path).is_file() || d.path.is_file(), "{:?}", d.path);
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report["acc"].as_array().unwrap().len(), 3);
    assert!(out.join(CHECKPOINT_JSON).is_file());
}

#[test]
fn exit_codes() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let out = subdir(&root, "out");
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(
        run(&["train", "--data", s(&data), "--lambda", "-1", "--out", s(&out)]),
        1
    );
    assert_eq!(
        run(&["train", "--data", s(&data), "--batch-size", "0", "--out", s(&out)]),
        1
    );
    let missing = root.path().join("missing");
    assert_eq!(
        run(&["train", "--data", s(&data), "--steps", "1", "--out", s(&missing)]),
        3
    );
    assert!(!missing.exists());
    assert_eq!(run(&["gen-data", "--out", s(&missing)]), 3);
    assert_eq!(
        run(&["train", "--data", s(&root.path().join("nodata")), "--out", s(&out)]),
        3
    );

    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "lamda = 2.0\n").unwrap();
    assert_eq!(
        run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]),
        1
    );
}

#[test]
fn config_file_is_applied_and_flags_win() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, "mode = \"vanilla_single\"\nmax_steps = 7\nlambda = 0.0\n").unwrap();
    let out = subdir(&root, "out");
    assert_eq!(
        run(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--steps",
            "4",
            "--out",
            s(&out)
        ]),
        0
    );
    let manifest = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.details["train"]["mode"], "vanilla_single");
    assert_eq!(manifest.details["train"]["max_steps"], 4);
    assert_eq!(manifest.inputs.len(), 4);
}

#[test]
fn verify_only_runs_the_named_check() {
    let root = TempDir::new().unwrap();
    let out = subdir(&root, "verify");
    assert_eq!(run(&["verify", "--only", "appendixA", "--out", s(&out)]), 0);
    let text = std::fs::read_to_string(out.join(VERIFY_JSONL)).unwrap();
    let names: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["name"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(names, vec!["appendixA/nll_vs_ce"]);
    assert_eq!(run(&["verify", "--only", "bogus"]), 1);
}

#[test]
fn sweep_matches_single_runs_and_lists_every_run() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let flags = TrainFlags {
        data: Some(data.clone()),
        steps: Some(40),
        ..TrainFlags::default()
    };
    let sweep_out = subdir(&root, "sweep");
    let result = cmd_sweep_lambda(&SweepArgs {
        flags: flags.clone(),
        lambdas: "0,2".into(),
        seeds: "0,1,2".into(),
        workers: 3,
        out: sweep_out.clone(),
    })
    .unwrap();
    assert_eq!(result.runs.len(), 6);
    assert_eq!(result.rows.len(), 2);
    let manifest = Manifest::load(&sweep_out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.details["runs"].as_array().unwrap().len(), 6);
    assert_eq!(
        std::fs::read_to_string(sweep_out.join(SWEEP_CSV))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let single_out = subdir(&root, "single");
    let single = cmd_train(&TrainArgs {
        flags: TrainFlags {
            mode: Some(lht::Mode::LhtF2c),
            ..flags
        },
        lambda: Some(0.0),
        seed: Some(1),
        out: single_out,
    })
    .unwrap();
    assert_eq!(result.runs[1].lambda, 0.0);
    assert_eq!(result.runs[1].seed, 1);
    assert_eq!(result.runs[1], single.summary);
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let args = |workers: usize, out: PathBuf| SweepArgs {
        flags: TrainFlags {
            data: Some(data.clone()),
            steps: Some(20),
            ..TrainFlags::default()
        },
        lambdas: "0.5,1".into(),
        seeds: "3,4".into(),
        workers,
        out,
    };
    let a = cmd_sweep_lambda(&args(1, subdir(&root, "a"))).unwrap();
    let b = cmd_sweep_lambda(&args(4, subdir(&root, "b"))).unwrap();
    assert_eq!(a.runs, b.runs);
}

#[test]
fn drop_level_reports_backtracked_accuracy() {
    let root = TempDir::new().unwrap();
    let data = small_data(&root);
    let out = subdir(&root, "out");
    let outcome = cmd_train(&TrainArgs {
        flags: TrainFlags {
            data: Some(data),
            steps: Some(20),
            drop_level: Some(2),
            ..TrainFlags::default()
        },
        lambda: None,
        seed: None,
        out,
    })
    .unwrap();
    assert_eq!(outcome.report.acc.len(), 2);
    let dropped = outcome.summary.dropped_level.unwrap();
    assert_eq!(dropped.level, 2);
    assert!((0.0..=1.0).contains(&dropped.backtracked_acc));
}
