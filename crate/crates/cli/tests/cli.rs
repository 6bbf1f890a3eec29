use std::path::Path;
use std::process::{Command, Output};

use fusionmil::harness::TrainConfig;
use fusionmil::model::{Architecture, ModelConfig};

fn fusionmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionmil"))
        .args(args)
        .env_remove("FUSIONMIL_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let cfg = TrainConfig {
        model: ModelConfig {
            conv_filters: vec![4, 8, 8],
            bottleneck: 16,
            embedding_dim: 16,
            attention_dim: 8,
            lstm_cells: 8,
            loc_fc_widths: vec![16, 16],
            classifier_hidden: 16,
            ..ModelConfig::for_architecture(Architecture::FusionMil)
        },
        lr: 3e-3,
        batch: 16,
        max_epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let path = dir.join("train.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_prints_usage() {
    let o = fusionmil(&["gradcheck", "--bogus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_data_root_fails() {
    let o = fusionmil(&["ingest", "--out", "unused"]);
    assert!(!o.status.success());
    let o = fusionmil(&["ingest", "--root", "/nonexistent/fusionmil", "--out", "unused"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusionmil(&["gradcheck", "--coords", "2", "--out", dir.path().to_str().unwrap()]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("PASS fusion_mil/train"));
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn synth_train_evaluate_smooth() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let data = p("data");
    let o = fusionmil(&[
        "synth",
        "--out",
        &data,
        "--users",
        "2",
        "--sessions",
        "1",
        "--minutes",
        "40",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{:?}", o);
    assert!(dir.path().join("data/manifest.json").exists());

    let o = fusionmil(&["ingest", "--root", &data, "--out", &p("ingest")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("user0/day0 40"));

    let o = fusionmil(&["preprocess", "--root", &data, "--out", &p("cache")]);
    assert!(o.status.success());
    assert!(dir.path().join("cache/spectrograms.ckpt").exists());

    let cfg = small_config(dir.path());
    let model = p("model");
    let o = fusionmil(&[
        "train",
        "--root",
        &data,
        "--config",
        &cfg,
        "--stream-minutes",
        "5",
        "--out",
        &model,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "model.ckpt",
        "model.json",
        "transitions.txt",
        "history.json",
        "manifest.json",
    ] {
        assert!(dir.path().join("model").join(f).exists(), "{f}");
    }

    let o = fusionmil(&["evaluate", "--root", &data, "--model", &model]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("without hmm") && text.contains("with hmm"));
    let o = fusionmil(&["evaluate", "--root", &data, "--model", &model, "--no-hmm"]);
    let text = stdout(&o);
    assert!(text.contains("without hmm") && !text.contains("with hmm"));

    let smoothed = p("smoothed.txt");
    let o = fusionmil(&[
        "smooth",
        "--probs",
        &p("model/eval/probs.txt"),
        "--transitions",
        &p("model/transitions.txt"),
        "--out",
        &smoothed,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(&smoothed).unwrap();
    let probs = std::fs::read_to_string(p("model/eval/probs.txt")).unwrap();
    assert_eq!(rows.lines().count(), probs.lines().count());
}

#[test]
fn smooth_rejects_short_rows() {
    let dir = tempfile::tempdir().unwrap();
    let probs = dir.path().join("p.txt");
    std::fs::write(&probs, "s 0 0.5 0.5\n").unwrap();
    let t = dir.path().join("t.txt");
    fusionmil::hmm::TransitionMatrix::uniform().save(&t).unwrap();
    let o = fusionmil(&[
        "smooth",
        "--probs",
        probs.to_str().unwrap(),
        "--transitions",
        t.to_str().unwrap(),
        "--out",
        dir.path().join("o.txt").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}
