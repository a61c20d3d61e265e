use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[model]
dim = 16
heads = 2

[backbone]
name = "pixel"

[image]
size = 32

[pfdf]
size = 32

[fptd]
patch_size = 2

[training]
epochs = 1
lr = 1e-3

[synth]
resolution = 32
train = 4
test_normal = 2
test_anomalous = 2
"#;

fn stmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &Path) -> usize {
    std::fs::read_to_string(csv).unwrap().lines().count() - 1
}

#[test]
fn override_lands_in_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path());
    let out = tmp.path().join("run");
    let o = stmae(&["train", "-c", s(&cfg), "--set", "training.epochs=1", "--set", "model.dim=8", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(dump.contains("epochs = 1"), "{dump}");
    assert!(dump.contains("dim = 8"), "{dump}");
    assert!(out.join("synthetic/checkpoint.safetensors").exists());
    assert!(data_rows(&out.join("synthetic/loss.csv")) >= 1);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    assert!(run["version"].is_string());
}

#[test]
fn missing_dataset_root_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = stmae(&[
        "train",
        "--set",
        "data.layout=\"mvtec\"",
        "--set",
        "data.root=\"/nonexistent/mvtec\"",
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.root"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_checkpoint_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let o = stmae(&["train", "--set", "training.epoch=1", "--out", s(&tmp.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let bogus = tmp.path().join("bogus.safetensors");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let cfg = tiny(tmp.path());
    let o = stmae(&["eval", "--checkpoint", s(&bogus), "-c", s(&cfg), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_then_eval_writes_metrics_scores_and_heatmaps() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path());
    let train = tmp.path().join("train");
    assert!(stmae(&["train", "-c", s(&cfg), "--out", s(&train)]).status.success());

    let eval = tmp.path().join("eval");
    let o = stmae(&["eval", "--checkpoint", s(&train), "-c", s(&cfg), "--tta-rounds", "2", "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert!(col("pixel_auroc").parse::<f64>().is_ok());
    assert_eq!(col("tta_rounds"), "2");
    assert_eq!(data_rows(&eval.join("synthetic/scores.csv")), 4);
    let heat = eval.join("synthetic/heatmaps");
    let pngs = std::fs::read_dir(&heat).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 4);
    let img = image::open(heat.join("test_good_0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    assert!(matches!(img, image::DynamicImage::ImageLuma8(_)));
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(heat.join("test_good_0000.json")).unwrap()).unwrap();
    assert!(side["min"].as_f64().unwrap() <= side["max"].as_f64().unwrap());

    let quiet = tmp.path().join("quiet");
    let o = stmae(&["eval", "--checkpoint", s(&train), "-c", s(&cfg), "--no-heatmaps", "--out", s(&quiet)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!quiet.join("synthetic/heatmaps").exists());

    // A different patch size cannot reuse the trained weights.
    let o = stmae(&["eval", "--checkpoint", s(&train), "-c", s(&cfg), "--set", "fptd.patch_size=4", "--out", s(&quiet)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let ckpt = train.join("synthetic/checkpoint.safetensors");
    let sample = tmp.path().join("sample.png");
    image::RgbImage::from_pixel(40, 40, image::Rgb([120, 90, 60])).save(&sample).unwrap();
    let inf = tmp.path().join("infer");
    let o = stmae(&["infer", "--checkpoint", s(&ckpt), s(&sample), "--out", s(&inf)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&inf.join("scores.csv")), 1);
}

#[test]
fn ablate_mode_and_patch_size_tables() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path());
    let mode = tmp.path().join("mode");
    let o = stmae(&["ablate", "--axis", "mode", "-c", s(&cfg), "--out", s(&mode)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&mode.join("ablation.csv")), 3);

    let k = tmp.path().join("k");
    let o = stmae(&["ablate", "--axis", "K", "-c", s(&cfg), "--out", s(&k)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(k.join("ablation.csv")).unwrap();
    let values: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["2", "4", "8", "16"]);

    let o = stmae(&["ablate", "--axis", "depth", "-c", s(&cfg), "--out", s(&k)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_bench_is_reproducible_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = stmae(&["synth-bench", "--seed", "7", "-c", s(&cfg), "--no-heatmaps", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let dump = std::fs::read_to_string(tmp.path().join("a/config.toml")).unwrap();
    assert!(dump.contains("seed = 7"));
}

#[test]
fn out_env_sets_the_run_root() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_stmae"))
        .args(["ablate", "--axis", "nope"])
        .env("STMAE_OUT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let cfg = tiny(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_stmae"))
        .args(["train", "-c", s(&cfg)])
        .env("STMAE_OUT", tmp.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("train-"))
        .collect();
    assert_eq!(runs.len(), 1);
}
