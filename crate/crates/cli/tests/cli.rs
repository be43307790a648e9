use std::path::Path;
use std::process::{Command, Output};

fn rivolution(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rivolution"))
        .args(args)
        .env("RIVOLUTION_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rivolution(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = rivolution(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["generate", "pair", "train", "predict", "widths", "evaluate", "report", "repro"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = rivolution(&["generate", "--bogus-flag", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
}

#[test]
fn missing_dataset_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rivolution(&["train", "--dataset", s(&tmp.path().join("nope.toml")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "epochs = 2\nlearning_rat = [0.1]\n").unwrap();
    let out = rivolution(&["train", "--config", s(&cfg), "--dataset", s(tmp.path()), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn bad_worker_count_is_data_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_rivolution"))
        .args(["widths", "--mask", "a", "--transects", "b", "--out", "c"])
        .env("RIVOLUTION_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_generate_train_predict_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&["generate", "--scenes", "6", "--hr-size", "32", "--factor", "4", "--frames", "3", "--cloud-prob", "0.3", "--seed", "4", "--out", s(&data)]);
    assert!(data.join("manifest.toml").is_file());
    assert!(data.join("run_config.json").is_file());

    // same seed, same bytes
    let again = root.join("again");
    ok(&["generate", "--scenes", "6", "--hr-size", "32", "--factor", "4", "--frames", "3", "--cloud-prob", "0.3", "--seed", "4", "--out", s(&again)]);
    assert_eq!(
        std::fs::read(data.join("manifest.toml")).unwrap(),
        std::fs::read(again.join("manifest.toml")).unwrap()
    );

    let cfg = root.join("train.toml");
    std::fs::write(&cfg, "learning_rates = [0.003]\nframes = 3\n[model]\ndepth = 1\nbase_channels = 4\nconvs_per_level = 1\n").unwrap();
    let ckpt = root.join("run");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--regime", "sr", "--strategy", "output-up", "--epochs", "1", "--seed", "2", "--out", s(&ckpt)]);
    assert!(ckpt.join("checkpoint.json").is_file());
    let log = std::fs::read_to_string(ckpt.join("training_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let pred = root.join("pred");
    ok(&["predict", "--strategy", "sr", "--checkpoint", s(&ckpt.join("checkpoint.json")), "--scene", s(&data.join("scenes/scene-0000")), "--out", s(&pred)]);
    assert!(pred.join("mask/header.toml").is_file());
    assert!(pred.join("logits/header.toml").is_file());

    let widths = root.join("widths.csv");
    ok(&["widths", "--mask", s(&pred.join("mask")), "--transects", s(&pred.join("transects.csv")), "--geometric-correction", "--out", s(&widths)]);
    assert!(std::fs::read_to_string(&widths).unwrap().lines().count() > 1);

    let eval = root.join("eval");
    ok(&["evaluate", "--checkpoint", s(&ckpt.join("checkpoint.json")), "--dataset", s(&data.join("manifest.toml")), "--split", "test", "--out", s(&eval)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "superrivolution/output-up");
    assert_eq!(report["config"]["eval"]["frames"], 3);

    let cmp = root.join("cmp");
    ok(&["report", "--compare", s(&eval), s(&eval.join("report.json")), "--out", s(&cmp)]);
    assert!(cmp.join("comparison.md").is_file());
}

#[test]
fn pair_builds_a_loadable_dataset() {
    use rivolution::ingest::{Dataset, FrameMetadata};
    use rivolution::raster::{write_image, write_mask, BinaryMask, GeoGrid, MultibandImage};

    let tmp = tempfile::tempdir().unwrap();
    let (hr_dir, lr_dir, out) = (tmp.path().join("hr"), tmp.path().join("lr"), tmp.path().join("paired"));
    let anchor: chrono::DateTime<chrono::Utc> = "2024-06-01T00:00:00Z".parse().unwrap();
    let hr = GeoGrid::new(0.0, 0.0, 3.0, 40, 40).unwrap();
    let lr = hr.coarsen(4).unwrap();
    for (id, split) in [("a", "train"), ("b", "test")] {
        let mut attrs = toml::Table::new();
        attrs.insert("anchor".into(), anchor.to_rfc3339().into());
        attrs.insert("split".into(), split.into());
        write_mask(&hr_dir.join(id).join("label"), &BinaryMask::from_fn(hr, |_, c| c > 15 && c < 25), attrs).unwrap();
        for (j, day) in [-90i64, -10, 0, 5, 12].iter().enumerate() {
            let meta = FrameMetadata::new(anchor + chrono::Duration::days(*day), 0.0, j, format!("{id}{j}")).unwrap();
            let img = MultibandImage::constant(lr, 4, 0.1 * j as f64).unwrap();
            write_image(&lr_dir.join(id).join(format!("f{j}")), &img, meta.to_attributes()).unwrap();
        }
    }
    ok(&["pair", "--hr-dir", s(&hr_dir), "--lr-dir", s(&lr_dir), "--window-days", "61", "--frames", "8", "--out", s(&out)]);
    let ds = Dataset::load(&out.join("manifest.toml")).unwrap();
    assert_eq!(ds.scenes.len(), 2);
    assert_eq!(ds.split(rivolution::ingest::Split::Test).len(), 1);
    // four in-window frames padded cyclically to eight
    assert_eq!(ds.scenes[0].1.frames().len(), 8);

    let missing = rivolution(&["pair", "--hr-dir", s(&tmp.path().join("none")), "--lr-dir", s(&lr_dir), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
}
