//! `stmae`: train, evaluate and ablate the anomaly detector from the shell.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use stmae::config::RunConfig;
use stmae::data::{Dataset, ImageSource};
use stmae::evaluation::{evaluate_features, extract_test_features, mean_report, scores_csv, ImageResult, MetricsReport, METRICS_HEADER};
use stmae::pipeline::{self, AblationAxis};
use stmae::training::{Checkpoint, LossLog, StepRecord};
use stmae::{Error, Result};

use output::RunDir;

/// Default root for run directories when `--out` is not given.
pub const OUT_ENV: &str = "STMAE_OUT";

#[derive(Parser)]
#[command(name = "stmae", version, about = "Siamese transition masked autoencoder for visual anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size defaults: 256 px input, 64×64 fused map, K=4, 400 epochs.
    Full,
    /// Minutes on one CPU core: 64 px input, 16×16 fused map, K=2, nano, 30 epochs.
    Desk,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set training.epochs=1`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to a fresh directory under $STMAE_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults for every key not set by the file or overrides. `full`
    /// unless noted otherwise.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args, Debug)]
struct Scoring {
    /// Decoupling draws averaged per test image.
    #[arg(long)]
    tta_rounds: Option<usize>,
    /// Skip heatmap PNGs.
    #[arg(long)]
    no_heatmaps: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per dataset category.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a test split with a trained checkpoint.
    Eval {
        /// Checkpoint file, or a `train` run directory holding one per category.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Score individual images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to score.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Train and evaluate once per value of one configuration axis.
    Ablate {
        /// mode, K, hierarchy, backbone, variant or loss_modality.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis's standard sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic benchmark, train and evaluate end to end
    /// (desk preset by default).
    SynthBench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
}

fn resolve(common: &Common, base: &RunConfig, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    match &common.config {
        Some(path) => RunConfig::load(path, base, &overrides),
        None => RunConfig::resolve(base, None, &overrides),
    }
}

fn preset(p: Option<Preset>) -> RunConfig {
    match p.unwrap_or(Preset::Full) {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    }
}

fn scoring_overrides(s: &Scoring) -> Vec<String> {
    s.tta_rounds.map(|n| format!("eval.tta_rounds={n}")).into_iter().collect()
}

fn run_dir(common: &Common, command: &str) -> Result<RunDir> {
    let path = match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
            root.join(format!("{command}-{stamp}"))
        }
    };
    RunDir::create(path)
}

fn train_datasets(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let fx = cfg.feature_config().build()?;
    for ds in pipeline::load_datasets(cfg)? {
        let cat = dir.category(&ds.category)?;
        let mut log = LossLog::open(&cat.join("loss.csv"))?;
        log::info!("{}: extracting {} training images", ds.category, ds.train_items.len());
        let feats = pipeline::extract_train_features(&fx, &ds)?;
        let started = Instant::now();
        let ckpt = pipeline::train_features(cfg, &feats, &mut epoch_logger(&ds.category, &mut log))?;
        log.flush()?;
        ckpt.save(&cat.join(output::CHECKPOINT))?;
        log::info!(
            "{}: {} steps in {:.1}s, checkpoint at {}",
            ds.category,
            ckpt.step,
            started.elapsed().as_secs_f64(),
            cat.join(output::CHECKPOINT).display()
        );
    }
    Ok(())
}

/// Appends every step to the loss log and reports each epoch's mean.
fn epoch_logger<'a>(category: &'a str, log: &'a mut LossLog) -> impl FnMut(&StepRecord) -> Result<()> + 'a {
    let mut epoch = 0;
    let mut sum = 0.0;
    let mut n = 0usize;
    move |r: &StepRecord| {
        if r.epoch != epoch && n > 0 {
            log::info!("{category}: epoch {epoch} mean loss {:.4}", sum / n as f64);
            (sum, n) = (0.0, 0);
        }
        epoch = r.epoch;
        sum += r.loss.total;
        n += 1;
        log.record(r)
    }
}

fn checkpoint_for(path: &Path, category: &str) -> PathBuf {
    if path.is_dir() {
        path.join(category).join(output::CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

/// Base configuration that reproduces the model and features stored in
/// `ckpt`, so a config file is only needed for data and scoring.
fn base_from_checkpoint(base: &RunConfig, ckpt: &Checkpoint) -> RunConfig {
    let mut cfg = base.clone();
    let m = &ckpt.model.config;
    cfg.model.variant = m.variant;
    cfg.model.dim = Some(m.dim);
    cfg.model.enc_depth = Some(m.enc_depth);
    cfg.model.dec_depth = Some(m.dec_depth);
    cfg.model.heads = Some(m.heads);
    cfg.model.ffb_mult = Some(m.ffb_mult);
    cfg.model.mode = m.mode;
    cfg.model.shared_encoder = m.shared_encoder;
    cfg.fptd.patch_size = m.patch;
    cfg.fptd.seed_policy = ckpt.train.seed_policy;
    let f = &ckpt.features;
    cfg.backbone.name = f.backbone;
    cfg.backbone.weights = f.weights.clone();
    cfg.backbone.taps = f.taps.clone();
    cfg.image.size = f.input_size;
    cfg.pfdf.size = f.pfdf_size;
    cfg.normalize = f.normalization;
    let t = &ckpt.train;
    cfg.training.lr = t.lr;
    cfg.training.batch_size = t.batch_size;
    cfg.training.epochs = t.epochs;
    cfg.training.optimizer = t.optimizer.clone();
    cfg.training.weight_decay = t.weight_decay;
    cfg.training.seed = t.seed;
    cfg.loss.lambda = t.lambda;
    cfg.loss.modality = t.modality;
    cfg
}

/// Evaluates each dataset with its checkpoint (or `fresh` models) and
/// writes metrics, per-image scores and heatmaps.
fn evaluate_all(
    cfg: &RunConfig,
    dir: &RunDir,
    datasets: &[Dataset],
    checkpoint: &mut dyn FnMut(&Dataset) -> Result<Checkpoint>,
    heatmaps: bool,
) -> Result<Vec<MetricsReport>> {
    let fx = cfg.feature_config().build()?;
    let mut reports = Vec::new();
    for ds in datasets {
        let ckpt = checkpoint(ds)?;
        pipeline::check_compatible(cfg, &ckpt)?;
        let cat = dir.category(&ds.category)?;
        let feats = extract_test_features(&fx, ds)?;
        let heat_dir = cat.join("heatmaps");
        let ev = evaluate_features(&pipeline::scorer(cfg, &fx, &ckpt), ds, &feats, &mut |item, map| {
            if heatmaps {
                output::write_heatmap(&heat_dir, &item.id, &map.map)?;
            }
            Ok(())
        })?;
        std::fs::write(cat.join("scores.csv"), scores_csv(&ev.images))?;
        println!("{}", ev.report.summary());
        reports.push(ev.report);
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if reports.len() > 1 {
        if let Some(m) = mean_report(&reports) {
            println!("{}", m.summary());
            csv.push_str(&m.csv_row());
            csv.push('\n');
        }
    }
    dir.write("metrics.csv", &csv)?;
    Ok(reports)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let seed = common.seed.map(|s| vec![format!("training.seed={s}")]).unwrap_or_default();
            let cfg = resolve(&common, &preset(common.preset), &seed)?;
            let dir = run_dir(&common, "train")?;
            dir.record(&cfg, "train")?;
            train_datasets(&cfg, &dir)
        }
        Command::Eval {
            checkpoint,
            common,
            scoring,
        } => {
            let mut extra = scoring_overrides(&scoring);
            extra.extend(common.seed.map(|s| format!("eval.seed={s}")));
            // The first dataset's checkpoint supplies model and feature defaults.
            let probe = resolve(&common, &preset(common.preset), &extra)?;
            let datasets = pipeline::load_datasets(&probe)?;
            let first = datasets.first().ok_or_else(|| Error::InvalidInput("no datasets".into()))?;
            let ckpt = Checkpoint::load(&checkpoint_for(&checkpoint, &first.category))?;
            let cfg = resolve(&common, &base_from_checkpoint(&preset(common.preset), &ckpt), &extra)?;
            let dir = run_dir(&common, "eval")?;
            dir.record(&cfg, "eval")?;
            evaluate_all(
                &cfg,
                &dir,
                &datasets,
                &mut |ds| Checkpoint::load(&checkpoint_for(&checkpoint, &ds.category)),
                !scoring.no_heatmaps,
            )?;
            Ok(())
        }
        Command::Infer {
            checkpoint,
            images,
            common,
            scoring,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut extra = scoring_overrides(&scoring);
            extra.extend(common.seed.map(|s| format!("eval.seed={s}")));
            let cfg = resolve(&common, &base_from_checkpoint(&preset(common.preset), &ckpt), &extra)?;
            pipeline::check_compatible(&cfg, &ckpt)?;
            let dir = run_dir(&common, "infer")?;
            dir.record(&cfg, "infer")?;
            let fx = cfg.feature_config().build()?;
            let scorer = pipeline::scorer(&cfg, &fx, &ckpt);
            let mut results = Vec::new();
            for path in &images {
                let id = path.to_string_lossy().into_owned();
                let map = scorer.score_image(&ImageSource::File(path.clone()).load()?, &id)?;
                if !scoring.no_heatmaps {
                    output::write_heatmap(&dir.path().join("heatmaps"), &id, &map.map)?;
                }
                println!("{id}\t{:.6}", map.image_score);
                results.push(ImageResult {
                    id,
                    label: 0,
                    score: map.image_score,
                    frame: None,
                });
            }
            dir.write("scores.csv", &scores_csv(&results))
        }
        Command::Ablate { axis, values, common } => {
            let axis: AblationAxis = axis.parse()?;
            let seed = common.seed.map(|s| vec![format!("training.seed={s}")]).unwrap_or_default();
            let cfg = resolve(&common, &preset(common.preset), &seed)?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            // Surface bad values before any data is loaded.
            for v in &values {
                axis.apply(&cfg, v)?;
            }
            let dir = run_dir(&common, "ablate")?;
            dir.record(&cfg, "ablate")?;
            let mut rows = Vec::new();
            for ds in pipeline::load_datasets(&cfg)? {
                rows.extend(pipeline::ablation_run(&cfg, &ds, axis, &values, &mut |r| {
                    println!("{axis}={}: {}", r.value, r.report.summary());
                })?);
            }
            dir.write("ablation.csv", &pipeline::ablation_csv(&rows))
        }
        Command::SynthBench { common, scoring } => {
            let mut extra = vec!["data.layout=\"synthetic\"".to_string()];
            extra.extend(scoring_overrides(&scoring));
            if let Some(s) = common.seed {
                extra.extend([format!("training.seed={s}"), format!("eval.seed={s}"), format!("synth.seed={s}")]);
            }
            // Desk-sized unless another preset is asked for.
            let cfg = resolve(&common, &preset(common.preset.or(Some(Preset::Desk))), &extra)?;
            let dir = run_dir(&common, "synth-bench")?;
            dir.record(&cfg, "synth-bench")?;
            train_datasets(&cfg, &dir)?;
            let datasets = pipeline::load_datasets(&cfg)?;
            evaluate_all(
                &cfg,
                &dir,
                &datasets,
                &mut |ds| Checkpoint::load(&dir.path().join(&ds.category).join(output::CHECKPOINT)),
                !scoring.no_heatmaps,
            )?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is_user_error() { "usage" } else { "runtime" };
            eprintln!("error ({kind}): {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
