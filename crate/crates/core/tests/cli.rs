use std::path::Path;
use std::process::{Command, Output};

use cfuseg::cli::{ExperimentManifest, PredictionRecord, CHECKPOINT_FILE, EXPERIMENT_FILE, REPORT_JSON};
use cfuseg::dataset::TEST_SPLIT_FILE;

fn cfuseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfuseg")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, n: usize, size: usize, seed: u64) {
    let o = cfuseg(&[
        "generate",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--size",
        &size.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY: [&str; 8] = [
    "--set",
    "image_size=32",
    "--set",
    "base_channels=4",
    "--set",
    "max_epochs=2",
    "--set",
    "batch_size=2",
];

fn read_manifest(dir: &Path) -> ExperimentManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(EXPERIMENT_FILE)).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(cfuseg(&[]).status.code(), Some(1));
    assert_eq!(cfuseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cfuseg(&["generate", "--bogus"]).status.code(), Some(1));
    assert_eq!(cfuseg(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = cfuseg(&["train", "--data", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), 4, 32, 0);
    let data = dir.path().to_str().unwrap();
    let out = dir.path().join("run");
    for (set, key) in [
        ("depth=5", "depth"),
        ("lr=-1", "lr"),
        ("learning_speed=3", "learning_speed"),
        ("batch_size=zero", "batch_size"),
    ] {
        let o = cfuseg(&["train", "--data", data, "--out", out.to_str().unwrap(), "--set", set]);
        assert_eq!(o.status.code(), Some(1), "{set}");
        assert!(stderr(&o).contains(key), "{set}: {}", stderr(&o));
    }
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nimage_size=32\npatience=0\n").unwrap();
    let o = cfuseg(&["train", "--data", data, "--out", "o", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("patience"));
}

#[test]
fn generate_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path(), 5, 32, 7);
    generate(b.path(), 5, 32, 7);
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    // images, masks, scenes, manifest and the two split files
    assert_eq!(names.len(), 5 * 3 + 3);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
    let test = std::fs::read_to_string(a.path().join(TEST_SPLIT_FILE)).unwrap();
    assert_eq!(test.lines().count(), 1);
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 10, 32, 3);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(TINY);
    let o = cfuseg(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let m = read_manifest(&run);
    m.verify(&run).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.config.image_size, 32);
    assert_eq!(m.split.trainval.len() + m.split.test.len(), 10);
    assert!(m.config_text.contains("patience=10"));

    // The test images are opened only in the final reporting phase.
    let first_test = m.access_log.iter().position(|r| r.phase == "test").unwrap();
    assert!(m.access_log[..first_test].iter().all(|r| r.phase != "test"));
    assert!(m.access_log[first_test..].iter().all(|r| r.phase == "test"));
    let test_files: Vec<String> = m.split.test.iter().map(|i| format!("image_{i:03}.ppm")).collect();
    for r in &m.access_log[..first_test] {
        assert!(!test_files.contains(&r.file), "{} read during {}", r.file, r.phase);
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join(REPORT_JSON)).unwrap()).unwrap();
    assert!(report.get("test").is_some() && report.get("trainval").is_some());

    // A tampered artifact fails verification.
    let ckpt = run.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&ckpt).unwrap();
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 1;
    std::fs::write(&ckpt, &bad).unwrap();
    assert!(m.verify(&run).is_err());
    std::fs::write(&ckpt, &bytes).unwrap();

    let pred = dir.path().join("pred");
    let img0 = data.join("image_000.ppm");
    let img1 = data.join("image_001.ppm");
    let o = cfuseg(&[
        "predict",
        "--model",
        ckpt.to_str().unwrap(),
        "--images",
        img0.to_str().unwrap(),
        img1.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["mask_000.pgm", "mask_001.pgm", "overlay_000.ppm", "overlay_001.ppm"] {
        assert!(pred.join(f).exists(), "{f}");
    }
    let counts: Vec<PredictionRecord> =
        serde_json::from_str(&std::fs::read_to_string(pred.join("counts.json")).unwrap()).unwrap();
    assert_eq!(counts.len(), 2);

    // Evaluating ground truth against itself: perfect scores.
    let gt = dir.path().join("gt");
    std::fs::create_dir(&gt).unwrap();
    for f in ["mask_000.pgm", "mask_001.pgm"] {
        std::fs::copy(data.join(f), gt.join(f)).unwrap();
    }
    let json = dir.path().join("eval.json");
    let o = cfuseg(&[
        "evaluate",
        "--pred",
        gt.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["map"], 1.0);
    let o = cfuseg(&["evaluate", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));

    // Missing checkpoint: usage error naming the file.
    let o = cfuseg(&["predict", "--model", "missing.bin", "--images", img0.to_str().unwrap(), "--out", "p"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.bin"));
}

#[test]
fn same_command_same_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 6, 32, 1);
    let hashes = |name: &str| {
        let run = dir.path().join(name);
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
        args.extend(TINY);
        assert!(cfuseg(&args).status.success());
        let m = read_manifest(&run);
        (m.artifacts.iter().map(|a| a.sha256.clone()).collect::<Vec<_>>(), m.access_log, m.seeds)
    };
    assert_eq!(hashes("a"), hashes("b"));
}

#[test]
fn search_ranks_refits_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 6, 32, 2);
    let out = dir.path().join("search");
    let mut args = vec![
        "search",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--grid",
        "lr=1e-3,1e-4",
        "--folds",
        "2",
    ];
    args.extend(TINY);
    let o = cfuseg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_manifest(&out);
    m.verify(&out).unwrap();
    assert!(m.access_log.iter().any(|r| r.phase == "search"));
    let first_test = m.access_log.iter().position(|r| r.phase == "test").unwrap();
    assert!(m.access_log[..first_test].iter().all(|r| r.phase == "search"));
    let cv: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cv_results.json")).unwrap()).unwrap();
    assert_eq!(cv["ranking"].as_array().unwrap().len(), 2);

    let bad = cfuseg(&["search", "--data", data.to_str().unwrap(), "--out", "x", "--grid", "depth=3"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("depth"));
}

#[test]
fn gradcheck_passes() {
    let o = cfuseg(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with("pass")).count(), 4);
}

#[test]
fn canvas_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), 3, 32, 0);
    let o = cfuseg(&["train", "--data", dir.path().to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("image_size"));
}
