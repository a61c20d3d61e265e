//! End-to-end runs driven by a [`RunConfig`]: loading data, training,
//! scoring and ablation sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{
    few_shot_subset, list_mvtec_categories, load_folder_dataset, load_frames_dataset, load_mvtec_layout,
    synth_generate, Dataset, Layout,
};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{evaluate_features, extract_test_features, Evaluation, MetricsReport, Scorer, METRICS_HEADER};
use crate::lpsr::{Arch, FeatureConfig, FeatureExtractor, Hierarchy, Pfdf};
use crate::model::{Mode, Variant};
use crate::residuals::LossModality;
use crate::training::{train, Checkpoint, StepRecord};

/// Every dataset the configuration points at; one per MVTec category.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    let d = &cfg.data;
    let root = || d.root.clone().ok_or_else(|| config_err!("data.root is required for the {:?} layout", d.layout));
    let sets = match d.layout {
        Layout::Synthetic => vec![synth_generate(&cfg.synth)?],
        Layout::Mvtec => {
            let root = root()?;
            let cats = match &d.category {
                Some(c) => vec![c.clone()],
                None => list_mvtec_categories(&root)?,
            };
            if cats.is_empty() {
                return Err(config_err!("data.root: no categories under `{}`", root.display()));
            }
            cats.iter().map(|c| load_mvtec_layout(&root, c)).collect::<Result<_>>()?
        }
        Layout::Folder => {
            let class = d.normal_class.as_deref().ok_or_else(|| config_err!("data.normal_class is required"))?;
            vec![load_folder_dataset(&root()?, class)?]
        }
        Layout::Frames => vec![load_frames_dataset(&root()?)?],
    };
    match d.few_shot {
        Some(k) => sets.iter().map(|ds| few_shot_subset(ds, k, d.few_shot_seed)).collect(),
        None => Ok(sets),
    }
}

pub fn extract_train_features(fx: &FeatureExtractor, ds: &Dataset) -> Result<Vec<Pfdf>> {
    ds.train_items
        .iter()
        .map(|t| fx.extract_image(&t.image.load()?, &t.id))
        .collect()
}

/// Trains on pre-extracted features and packs the result as a checkpoint.
pub fn train_features(
    cfg: &RunConfig,
    features: &[Pfdf],
    observer: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let tc = cfg.train_config();
    let trained = train(features, &cfg.model_config(), &tc, observer)?;
    Ok(Checkpoint::new(trained, tc, cfg.feature_config()))
}

/// Scorer settings taken from `cfg`, weights from `ckpt`.
pub fn scorer<'a>(cfg: &RunConfig, fx: &'a FeatureExtractor, ckpt: &'a Checkpoint) -> Scorer<'a> {
    Scorer {
        extractor: fx,
        model: &ckpt.model,
        score: cfg.score_config(),
        eval: cfg.eval.clone(),
    }
}

/// Refuses a checkpoint whose model or features differ from the request.
pub fn check_compatible(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    ckpt.ensure_model_config(&cfg.model_config())?;
    let (want, have) = (cfg.feature_config(), &ckpt.features);
    if &want != have {
        return Err(config_err!(
            "checkpoint features {have:?} do not match the requested {want:?}"
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Mode,
    PatchSize,
    Hierarchy,
    Backbone,
    Variant,
    LossModality,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Mode,
        AblationAxis::PatchSize,
        AblationAxis::Hierarchy,
        AblationAxis::Backbone,
        AblationAxis::Variant,
        AblationAxis::LossModality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Mode => "mode",
            AblationAxis::PatchSize => "K",
            AblationAxis::Hierarchy => "hierarchy",
            AblationAxis::Backbone => "backbone",
            AblationAxis::Variant => "variant",
            AblationAxis::LossModality => "loss_modality",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: Vec<&str> = match self {
            AblationAxis::Mode => Mode::ALL.iter().map(|m| m.name()).collect(),
            AblationAxis::PatchSize => vec!["2", "4", "8", "16"],
            AblationAxis::Hierarchy => Hierarchy::ALL.iter().map(|h| h.name()).collect(),
            AblationAxis::Backbone => vec!["vgg19", "resnet34", "resnet50", "mobilenet_v2"],
            AblationAxis::Variant => Variant::ALL.iter().map(|v| v.name()).collect(),
            AblationAxis::LossModality => LossModality::ALL.iter().map(|m| m.name()).collect(),
        };
        v.into_iter().map(String::from).collect()
    }

    /// `base` with this axis set to `value`, validated.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = |e: Error| config_err!("{} axis value `{value}`: {e}", self.name());
        match self {
            AblationAxis::Mode => cfg.model.mode = value.parse().map_err(bad)?,
            AblationAxis::PatchSize => {
                cfg.fptd.patch_size = value
                    .parse()
                    .map_err(|_| config_err!("K axis value `{value}` is not an integer"))?
            }
            AblationAxis::Hierarchy => {
                let h: Hierarchy = value.parse().map_err(bad)?;
                let arch = if base.backbone.name == Arch::Pixel { Arch::Vgg19 } else { base.backbone.name };
                let (arch, taps) = h.resolve(arch);
                cfg.backbone.name = arch;
                cfg.backbone.taps = taps;
            }
            AblationAxis::Backbone => {
                cfg.backbone.name = value.parse().map_err(bad)?;
                cfg.backbone.taps = Vec::new();
            }
            AblationAxis::Variant => {
                cfg.model.variant = value.parse().map_err(bad)?;
                cfg.model.dim = None;
                cfg.model.enc_depth = None;
                cfg.model.dec_depth = None;
                cfg.model.heads = None;
            }
            AblationAxis::LossModality => cfg.loss.modality = value.parse().map_err(bad)?,
        }
        cfg.validate().map_err(bad)?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        match key.as_str() {
            "k" | "patch_size" => Ok(AblationAxis::PatchSize),
            "loss" | "loss_modality" => Ok(AblationAxis::LossModality),
            _ => Self::ALL
                .into_iter()
                .find(|a| a.name() == key)
                .ok_or_else(|| config_err!("unknown ablation axis `{s}` (expected mode, K, hierarchy, backbone, variant or loss_modality)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub report: MetricsReport,
    pub train_seconds: f64,
}

/// Trains and evaluates one model per axis value. Every point is validated
/// before any training starts. Features are reused between consecutive
/// points that share a feature configuration.
pub fn ablation_run(
    base: &RunConfig,
    ds: &Dataset,
    axis: AblationAxis,
    values: &[String],
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(config_err!("no values for the {axis} axis"));
    }
    let points = values
        .iter()
        .map(|v| Ok((v.clone(), axis.apply(base, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut cache: Option<(FeatureConfig, FeatureExtractor, Vec<Pfdf>, Vec<Pfdf>)> = None;
    let mut rows = Vec::with_capacity(points.len());
    for (value, cfg) in points {
        let fc = cfg.feature_config();
        if cache.as_ref().is_none_or(|c| c.0 != fc) {
            let fx = fc.build()?;
            let train = extract_train_features(&fx, ds)?;
            let test = extract_test_features(&fx, ds)?;
            cache = Some((fc, fx, train, test));
        }
        let (_, fx, train_feats, test_feats) = cache.as_ref().expect("filled above");
        let started = Instant::now();
        let ckpt = train_features(&cfg, train_feats, &mut |_| Ok(()))?;
        let train_seconds = started.elapsed().as_secs_f64();
        let ev = evaluate_features(&scorer(&cfg, fx, &ckpt), ds, test_feats, &mut |_, _| Ok(()))?;
        let row = AblationRow {
            axis,
            value,
            report: ev.report,
            train_seconds,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("axis,value,train_seconds,{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.1},{}\n", r.axis, r.value, r.train_seconds, r.report.csv_row()));
    }
    out
}

/// Full run on one dataset: extract, train, evaluate.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    observer: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<(Checkpoint, Evaluation)> {
    let fx = cfg.feature_config().build()?;
    let train_feats = extract_train_features(&fx, ds)?;
    let ckpt = train_features(cfg, &train_feats, observer)?;
    let test_feats = extract_test_features(&fx, ds)?;
    let ev = evaluate_features(&scorer(cfg, &fx, &ckpt), ds, &test_feats, &mut |_, _| Ok(()))?;
    Ok((ckpt, ev))
}
