use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use collabctx::dataset::{load_embeddings, SplitBundle};
use collabctx::trainer::{train_from, write_resume, TrainConfig, TrainObserver, TrainState, TrainingData};

const BIN: &str = env!("CARGO_BIN_EXE_collabctx");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TRAIN_FLAGS: [&str; 12] = [
    "--dim",
    "8",
    "--max-epochs",
    "6",
    "--patience",
    "3",
    "--mlp-hidden",
    "384",
    "--batch-size",
    "256",
    "--seed",
    "9",
];

/// synth → preprocess into `root/{raw,split}`.
fn prepare(root: &Path) {
    let raw = root.join("raw");
    ok(&[
        "synth",
        "--out",
        p(&raw),
        "--users",
        "80",
        "--items",
        "60",
        "--dim",
        "8",
        "--p-in",
        "0.5",
        "--seed",
        "7",
    ]);
    ok(&[
        "preprocess",
        "--interactions",
        p(&raw.join("interactions.tsv")),
        "--embeddings",
        p(&raw.join("items.ccemb")),
        "--out",
        p(&root.join("split")),
        "--cold-count",
        "3",
        "--seed",
        "7",
    ]);
}

fn train_args<'a>(root: &'a Path, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "train",
        "--data",
        p(&root.join("split")),
        "--embeddings",
        p(&root.join("raw/items.ccemb")),
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(TRAIN_FLAGS.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn ok_owned(args: &[String]) -> String {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

fn manifest_outputs(dir: &Path) -> BTreeMap<String, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    serde_json::from_value(v["outputs"].clone()).unwrap()
}

#[test]
fn full_pipeline_is_checksum_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checksums = Vec::new();
    for run_id in ["a", "b"] {
        let root = tmp.path().join(run_id);
        prepare(&root);
        let model_dir = root.join("model");
        ok_owned(&train_args(&root, p(&model_dir), &[]));
        let report = root.join("report.jsonl");
        ok(&[
            "eval",
            "--data",
            p(&root.join("split")),
            "--model",
            p(&model_dir.join("model.ccmdl")),
            "--warm",
            "--cold",
            "--out",
            p(&report),
        ]);
        let proj = root.join("proj.tsv");
        ok(&[
            "inspect",
            "--model",
            p(&model_dir.join("model.ccmdl")),
            "--data",
            p(&root.join("split")),
            "--projections",
            p(&proj),
        ]);
        checksums.push((
            manifest_outputs(&root.join("raw")),
            manifest_outputs(&root.join("split")),
            manifest_outputs(&model_dir),
            std::fs::read(report).unwrap(),
            std::fs::read(proj).unwrap(),
        ));
    }
    assert!(!checksums[0].2.is_empty());
    assert_eq!(checksums[0], checksums[1]);
}

#[test]
fn eval_selects_settings_and_cutoffs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    prepare(root);
    let model_dir = root.join("model");
    ok_owned(&train_args(root, p(&model_dir), &[]));
    let model = model_dir.join("model.ccmdl");
    let split = root.join("split");
    let eval = |extra: &[&str]| -> Vec<serde_json::Value> {
        let mut args = vec!["eval", "--data", p(&split), "--model", p(&model), "--json"];
        args.extend_from_slice(extra);
        ok(&args).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };

    let default = eval(&[]);
    assert_eq!(default.len(), 2);
    assert!(default.iter().all(|r| r["setting"] == "warm"));
    assert_eq!(default[0]["mode"], "with_mlp");
    assert_eq!(default[1]["mode"], "without_mlp");
    let keys: Vec<&String> = default[0]["recall"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["10", "50"]);

    let cold_only = eval(&["--cold", "--mode", "without_mlp"]);
    assert_eq!(cold_only.len(), 1);
    assert_eq!(cold_only[0]["setting"], "cold");
    assert_eq!(cold_only[0]["mode"], "without_mlp");

    let four = eval(&["--warm", "--cold"]);
    assert_eq!(four.len(), 4);

    let custom = eval(&["--topk", "5,20"]);
    let keys: Vec<&String> = custom[0]["ndcg"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["20", "5"]);

    // bit-identical on repeat
    assert_eq!(eval(&["--warm", "--cold"]), four);
}

#[test]
fn three_rounds_give_six_phase_blocks() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    prepare(root);
    let out = root.join("model");
    ok_owned(&train_args(root, p(&out), &["--rounds", "3"]));
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    let ends: Vec<&str> = log.lines().filter(|l| l.starts_with("# end")).collect();
    assert_eq!(ends.len(), 6);
    assert!(ends[5].contains("user_tut:3"));
    assert!(log.starts_with("phase\tepoch\ttrain_loss\tvalid_recall@10\tvalid_ndcg@10\n"));
}

struct StopAfterFirstPhase<'a> {
    out: &'a Path,
    config: &'a TrainConfig,
    data: &'a TrainingData,
}

impl TrainObserver for StopAfterFirstPhase<'_> {
    fn on_phase_end(&mut self, state: &TrainState) -> collabctx::Result<()> {
        write_resume(
            self.out.join("resume.ccmdl"),
            self.config,
            state,
            self.data.splits.users(),
            self.data.splits.items(),
        )?;
        Err(collabctx::Error::InvalidArgument("simulated interruption".into()))
    }
}

#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    prepare(root);
    let full = root.join("full");
    ok_owned(&train_args(root, p(&full), &[]));

    // Interrupt a library run with the same config right after item tutoring.
    let config = TrainConfig {
        dim: 8,
        max_epochs: 6,
        patience: 3,
        seed: 9,
        loss: collabctx::objective::LossConfig {
            batch_size: 256,
            ..Default::default()
        },
        adapter: collabctx::adapter::AdapterConfig {
            hidden: 384,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let splits = SplitBundle::read_dir(root.join("split")).unwrap();
    let items = load_embeddings(root.join("raw/items.ccemb"), splits.items(), Some(8)).unwrap();
    let data = TrainingData::new(splits, items).unwrap();
    let partial = root.join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    let mut stop = StopAfterFirstPhase {
        out: &partial,
        config: &config,
        data: &data,
    };
    let fresh = TrainState::fresh(&config, &data).unwrap();
    assert!(train_from(&config, &data, fresh, &mut stop).is_err());

    ok_owned(&train_args(root, p(&partial), &["--resume"]));
    for file in ["model.ccmdl", "metrics.log"] {
        assert_eq!(
            std::fs::read(full.join(file)).unwrap(),
            std::fs::read(partial.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.tsv");
    let out = run(&["preprocess", "--interactions", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "learning_rate = -1.0\nuser_init_std = -0.5\n[adapter]\ndropout = 2.0\n",
    )
    .unwrap();
    prepare(tmp.path());
    let args = train_args(tmp.path(), p(&tmp.path().join("m")), &["--config", p(&cfg)]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("learning_rate") && err.contains("user_init_std") && err.contains("dropout"),
        "{err}"
    );
}

#[test]
fn runtime_errors_exit_with_one_and_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("inter.tsv");
    std::fs::write(&bad, "u1\ti1\nbroken-line\n").unwrap();
    let out = run(&[
        "preprocess",
        "--interactions",
        p(&bad),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("inter.tsv:2"), "{err}");
}

#[test]
fn training_rejects_embedding_dim_different_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    prepare(root);
    let out = run(&[
        "train",
        "--data",
        p(&root.join("split")),
        "--embeddings",
        p(&root.join("raw/items.ccemb")),
        "--out",
        p(&root.join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("768"));
}

#[test]
fn inspect_headers_magic_and_projections() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    prepare(root);
    let header = ok(&["inspect", "--file", p(&root.join("raw/items.ccemb")), "--header"]);
    assert!(header.contains("count\t60"), "{header}");
    assert!(header.contains("dim\t8"), "{header}");

    let junk = root.join("junk.ccemb");
    std::fs::write(&junk, b"NOTEMB\0\0\0\0").unwrap();
    let out = run(&["inspect", "--file", p(&junk), "--header"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"CCEMB1\""));

    let model_dir = root.join("model");
    ok_owned(&train_args(root, p(&model_dir), &[]));
    let model_header = ok(&["inspect", "--file", p(&model_dir.join("model.ccmdl"))]);
    assert!(model_header.contains("kind = \"model\""), "{model_header}");

    let proj = root.join("proj.tsv");
    ok(&[
        "inspect",
        "--model",
        p(&model_dir.join("model.ccmdl")),
        "--data",
        p(&root.join("split")),
        "--projections",
        p(&proj),
    ]);
    let split = SplitBundle::read_dir(root.join("split")).unwrap();
    let text = std::fs::read_to_string(proj).unwrap();
    let rows = text.lines().count() - 1;
    assert_eq!(rows, 2 * split.items().len() + split.users().len());
    assert!(text.starts_with("kind\tindex\tid\td0\t"));
}
