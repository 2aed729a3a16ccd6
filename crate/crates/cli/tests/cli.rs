use std::path::Path;

use avfusion_cli::{run_cli_with, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["avfusion"];
    full.extend_from_slice(args);
    let code = run_cli_with(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn synth(dir: &Path, task: &str) -> String {
    let data = dir.join("data");
    let (code, _, err) = run(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--task",
        task,
        "--videos",
        "3",
        "--val-videos",
        "1",
        "--frames",
        "90",
        "--visual-dim",
        "6",
        "--audio-dim",
        "3",
        "--seed",
        "5",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    data.join("manifest.csv").to_str().unwrap().to_string()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("cfg.txt");
    std::fs::write(
        &p,
        "visual.channels=4\naudio.channels=4\nencoder.d_model=8\nencoder.n_heads=2\n\
         encoder.n_layers=1\nencoder.ffn_dim=16\nmlp_hidden=8\ntrain.peak_lr=1e-3\n",
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, manifest: &str, task: &str, out: &str, seed: &str) -> (i32, String, String) {
    let cfg = tiny_config(dir);
    let out = dir.join(out);
    run(&[
        "train",
        "--manifest",
        manifest,
        "--task",
        task,
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--window",
        "40",
        "--stride",
        "20",
        "--batch-size",
        "4",
        "--epochs",
        "2",
        "--seed",
        seed,
    ])
}

#[test]
fn gradcheck_exits_zero_and_reports_error() {
    let (code, out, _) = run(&["gradcheck", "--task", "va"]);
    assert_eq!(code, EXIT_OK);
    let line = out.lines().find(|l| l.starts_with("max_relative_error=")).unwrap();
    let v: f64 = line["max_relative_error=".len()..].parse().unwrap();
    assert!(v < 1e-4);
}

#[test]
fn missing_manifest_is_usage_error() {
    let (code, _, err) = run(&["train", "--task", "va", "--out", "/tmp/unused"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--manifest"));
    let (code, _, _) = run(&["train", "--manifest", "m.csv", "--out", "o", "--task", "valence"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = run(&["eval", "--manifest", "m.csv"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let (code, _, err) = run(&[
        "train",
        "--manifest",
        missing.to_str().unwrap(),
        "--task",
        "va",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("nope.csv"), "{err}");
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "va");
    // Oracle predictions: copy each label file into the predictions layout.
    let data = dir.path().join("data");
    let mut csv = String::from("video_id,frame,valence,arousal\n");
    for id in ["train000", "train001", "train002", "val000"] {
        let text = std::fs::read_to_string(data.join(format!("labels/{id}.csv"))).unwrap();
        for line in text.lines().skip(1) {
            csv += &format!("{id},{line}\n");
        }
    }
    let pred = dir.path().join("oracle.csv");
    std::fs::write(&pred, csv).unwrap();
    let (code, out, err) = run(&[
        "eval",
        "--manifest",
        &manifest,
        "--predictions",
        pred.to_str().unwrap(),
        "--split",
        "all",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("ccc_valence=1.000000"), "{out}");
    assert!(out.contains("ccc_arousal=1.000000"), "{out}");
    assert!(out.contains("ccc_mean=1.000000"), "{out}");
}

#[test]
fn predict_writes_one_row_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "expr");
    let (code, _, err) = train(dir.path(), &manifest, "expr", "run", "1");
    assert_eq!(code, EXIT_OK, "{err}");
    let ckpt = dir.path().join("run/last");
    let pred = dir.path().join("pred.csv");
    let (code, out, err) = run(&[
        "predict",
        "--manifest",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--window",
        "40",
        "--stride",
        "20",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("wrote 360 rows"), "{out}");
    let text = std::fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 90);
    assert!(text.starts_with("video_id,frame,expr_class,p_class0,"));

    // Checkpoint eval and eval of the written predictions agree.
    let (code, direct, _) = run(&[
        "eval",
        "--manifest",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--window",
        "40",
        "--stride",
        "20",
    ]);
    assert_eq!(code, EXIT_OK);
    let (code, via_csv, _) = run(&["eval", "--manifest", &manifest, "--predictions", pred.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(direct, via_csv);
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "au");
    let (c1, o1, e1) = train(dir.path(), &manifest, "au", "a", "9");
    let (c2, o2, _) = train(dir.path(), &manifest, "au", "b", "9");
    assert_eq!(c1, EXIT_OK, "{e1}");
    assert_eq!(c2, EXIT_OK);
    let strip = |s: &str| s.lines().filter(|l| !l.contains("checkpoint=")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&o1), strip(&o2));
    let a = std::fs::read(dir.path().join("a/last/params.tnsr")).unwrap();
    let b = std::fs::read(dir.path().join("b/last/params.tnsr")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("a/steps.csv")).unwrap(),
        std::fs::read_to_string(dir.path().join("b/steps.csv")).unwrap()
    );
}

#[test]
fn config_task_conflict_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "va");
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "encoder.d_model=8\nencoder.n_heads=2\nbogus=1\n").unwrap();
    let (code, _, err) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--task",
        "va",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("bogus"), "{err}");
}
