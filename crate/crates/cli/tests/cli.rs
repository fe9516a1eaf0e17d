use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rfcnet::config::{ExperimentConfig, Profile};
use rfcnet::nn::FmKind;

fn rfcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfcnet"))
        .args(args)
        .env_remove("RFCNET_MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough for end-to-end runs in seconds.
fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::profile(Profile::Tiny);
    cfg.scene.image_size = 32;
    cfg.scene.sequence_length = 3;
    cfg.scene.square_size = [6, 10];
    cfg.scene.circle_radius = [2.0, 4.0];
    cfg.scene.wall_length = [6, 12];
    cfg.dataset.dir = dir.join("data");
    cfg.dataset.splits.train = 4;
    cfg.dataset.splits.val = 2;
    cfg.dataset.splits.test = 2;
    cfg.dataset.splits.clean_test = 2;
    cfg.dataset.shard_size = 3;
    for spec in cfg.models.values_mut() {
        spec.sequence_length = 3;
        spec.layers_per_db = 2;
        spec.growth = 3;
        spec.first_conv_features = 6;
    }
    cfg.train.max_epochs = 1;
    cfg.train.batch_size = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = rfcnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(rfcnet(&[]).status.code(), Some(1));
    assert_eq!(rfcnet(&["train", "--bogus"]).status.code(), Some(1));
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        ("generate-data", &["--config", "--profile", "--seed", "--out", "--mnist-dir", "--workers"]),
        ("train", &["--config", "--profile", "--model", "--data", "--out", "--seed", "--init-from"]),
        ("eval", &["--checkpoint", "--split", "--data", "--name", "--out", "--config"]),
        ("count-params", &["--spec", "--config", "--profile"]),
        ("report", &["--input", "--out", "--plot"]),
        ("grid-search", &["--config", "--data", "--out", "--seed"]),
    ];
    for (cmd, flags) in cases {
        let o = rfcnet(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        for flag in flags {
            assert!(stdout(&o).contains(flag), "{cmd} help lacks {flag}");
        }
    }
    assert_eq!(rfcnet(&["--help"]).status.code(), Some(0));
}

fn total(o: &Output) -> usize {
    let line = stdout(o).lines().find(|l| l.starts_with("total")).unwrap().to_string();
    line.split_whitespace().last().unwrap().parse().unwrap()
}

#[test]
fn wider_encoder_decoder_filters_have_more_parameters() {
    let ed1 = rfcnet(&["count-params", "--spec", "rfcd_ed1"]);
    let ed2 = rfcnet(&["count-params", "--spec", "rfcd_ed2"]);
    assert_eq!(ed1.status.code(), Some(0));
    assert!(total(&ed2) > total(&ed1));
    assert_eq!(total(&rfcnet(&["count-params", "--spec", "rfcd_ff"])), 994_462);
    let o = rfcnet(&["count-params", "--spec", "vgg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown model"));
}

#[test]
fn generate_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let config = write_config(dir, &cfg);
    let p = |s: &str| dir.join(s).to_str().unwrap().to_string();

    let o = rfcnet(&["generate-data", "--config", &config, "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stamp: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("data/stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 3);
    assert_eq!(stamp["config"]["scene"]["seed"], 3);
    assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);

    // the same seed regenerates the same shards
    let o = rfcnet(&["generate-data", "--config", &config, "--seed", "3", "--out", &p("again"), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read(dir.join("data/manifest.json")).unwrap(),
        fs::read(dir.join("again/manifest.json")).unwrap()
    );

    let o = rfcnet(&["train", "--config", &config, "--model", "rfcd_ff", "--out", &p("run"), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch   1"));
    for f in ["stamp.json", "metrics.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }

    let o = rfcnet(&[
        "eval", "--config", &config, "--checkpoint", &p("run/best.ckpt"), "--split", "test", "--split", "clean_test",
        "--out", &p("eval"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("split test") && text.contains("split clean_test"));
    assert!(text.contains("mean IoU") && text.contains("digit 9"));
    assert!(dir.join("eval/eval-clean_test.json").exists());
    assert!(dir.join("eval/stamp.json").exists());

    let o = rfcnet(&["report", "--input", &p("eval"), "--out", &p("report"), "--plot"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("run (clean_test)"));
    assert!(dir.join("report/mean_iou.png").exists());

    let o = rfcnet(&["eval", "--config", &config, "--checkpoint", &p("run/best.ckpt"), "--split", "holdout"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown split"));
}

#[test]
fn identity_filters_cannot_be_trained() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.models.get_mut("rfcd_ff").unwrap().fm_kind = Some(FmKind::Identity);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let o = rfcnet(&["train", "--config", &config, "--model", "rfcd_ff", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("identity"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let o = rfcnet(&["eval", "--checkpoint", missing.to_str().unwrap(), "--split", "test"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rfcnet(&["train", "--model", "fcd_s", "--out", tmp.path().to_str().unwrap(), "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = rfcnet(&["count-params", "--profile", "huge"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grid_search_ranks_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let config = write_config(dir, &cfg);
    assert_eq!(rfcnet(&["generate-data", "--config", &config]).status.code(), Some(0));
    let out = dir.join("grid");
    let o = rfcnet(&["grid-search", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(out.join("ranking.txt").exists());
    assert!(out.join("stamp.json").exists());
}
