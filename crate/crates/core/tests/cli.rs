use std::path::Path;
use std::process::{Command, Output};

use htnet::data::{
    load_checkpoint, load_dataset, load_manifest, read_json, save_features, write_json, AnnotationSet, ResultRecord,
    ResultsFile,
};
use htnet::evaluation::THUMOS_THRESHOLDS;
use htnet::model::Htnet;
use htnet::training::evaluate;

fn htnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htnet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("HTNET_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.videos=4",
    "--set",
    "synth.eval_videos=2",
    "--set",
    "synth.min_snippets=32",
    "--set",
    "synth.max_snippets=40",
    "--set",
    "synth.max_actions=2",
    "--set",
    "synth.max_action_len=8",
    "--set",
    "synth.feature_dim=6",
    "--set",
    "model.levels=2",
    "--set",
    "model.channels=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.ffn_mult=1",
    "--set",
    "train.epochs=3",
    "--set",
    "train.lr=1e-3",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    htnet(dir, &refs)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = htnet(dir.path(), &["--frobnicate", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = htnet(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("selftest"));
}

#[test]
fn override_is_echoed_and_type_checked() {
    let dir = tempfile::tempdir().unwrap();
    let o = htnet(dir.path(), &["--out", "d", "--set", "model.delta=0.5", "synth"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(dir.path().join("d/config.toml")).unwrap();
    assert!(cfg.contains("delta = 0.5"), "{cfg}");
    let o = htnet(dir.path(), &["--out", "e", "--set", "model.delta=banana", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.delta"), "{}", stderr(&o));
    let o = htnet(dir.path(), &["--out", "e", "--set", "model.no_such_key=1", "synth"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = htnet(
        dir.path(),
        &["eval", "--results", "nope.json", "--manifest", "m.json", "--annotations", "a.json"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("m.json"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(p, with(SMALL, &["--out", "data", "synth"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(
        p,
        with(
            SMALL,
            &["--out", "run", "train", "--manifest", "data/manifest.json", "--annotations", "data/annotations.json"],
        ),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.toml", "checkpoint.htnc", "metrics.jsonl"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(p.join("run/metrics.jsonl")).unwrap().lines().count(), 3);

    let o = htnet(
        p,
        &["--out", "pred", "predict", "--checkpoint", "run/checkpoint.htnc", "--manifest", "data/manifest.json", "--subset", "train"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = htnet(
        p,
        &[
            "--out",
            "eval",
            "eval",
            "--results",
            "pred/results.json",
            "--manifest",
            "data/manifest.json",
            "--annotations",
            "data/annotations.json",
            "--subset",
            "train",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(p.join("eval/report.json").exists() && p.join("eval/report.txt").exists());
    let printed: f64 = stdout(&o).trim().rsplit(' ').next().unwrap().parse().unwrap();

    let ckpt = load_checkpoint(&p.join("run/checkpoint.htnc")).unwrap();
    let model = Htnet::from_checkpoint(&ckpt).unwrap();
    let data = load_dataset(&p.join("data/manifest.json"), Some(&p.join("data/annotations.json"))).unwrap();
    let (report, _) = evaluate(&model, &data.subset("train"), &ckpt.config.inference, &THUMOS_THRESHOLDS).unwrap();
    assert!((printed - report.average_map).abs() < 5e-5, "{printed} vs {}", report.average_map);

    // rerunning from the echoed config reproduces the checkpoint
    let o = htnet(
        p,
        &[
            "--config",
            "run/config.toml",
            "--out",
            "rerun",
            "train",
            "--manifest",
            "data/manifest.json",
            "--annotations",
            "data/annotations.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(p.join("run/checkpoint.htnc")).unwrap(),
        std::fs::read(p.join("rerun/checkpoint.htnc")).unwrap()
    );
}

#[test]
fn perfect_results_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(p, with(SMALL, &["--out", "data", "synth"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = load_manifest(&p.join("data/manifest.json")).unwrap();
    let anns: AnnotationSet = read_json(&p.join("data/annotations.json")).unwrap();
    let results = ResultsFile {
        schema_version: 1,
        results: anns
            .videos
            .iter()
            .map(|(id, records)| {
                let recs = records
                    .iter()
                    .map(|a| ResultRecord {
                        start: a.start,
                        end: a.end,
                        label: manifest.classes[a.class_id].clone(),
                        score: 0.9,
                    })
                    .collect();
                (id.clone(), recs)
            })
            .collect(),
    };
    write_json(&p.join("perfect.json"), &results).unwrap();
    let o = htnet(
        p,
        &["eval", "--results", "perfect.json", "--manifest", "data/manifest.json", "--annotations", "data/annotations.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "average mAP 1.0000");
}

#[test]
fn nan_features_abort_training_with_sample_id() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(p, with(SMALL, &["--out", "data", "synth"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = load_dataset(&p.join("data/manifest.json"), None).unwrap();
    let victim = &data.videos[1];
    let mut bad = victim.features.clone();
    bad.data_mut()[3] = f64::NAN;
    save_features(&p.join(format!("data/features/{}.htnf", victim.id)), &bad).unwrap();
    let o = run(
        p,
        with(
            SMALL,
            &["--out", "run", "train", "--manifest", "data/manifest.json", "--annotations", "data/annotations.json"],
        ),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&victim.id), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = htnet(dir.path(), &["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
