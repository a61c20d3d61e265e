//! Run configuration: one TOML document with a section per concern, plus
//! `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{Layout, SynthSpec};
use crate::error::{config_err, Error, Result};
use crate::evaluation::EvalConfig;
use crate::fptd::GridShape;
use crate::lpsr::{Arch, FeatureConfig, Normalization};
use crate::model::{Mode, ModelConfig, Variant};
use crate::residuals::{LossModality, ScoreConfig, DEFAULT_LAMBDA, DEFAULT_SIGMA};
use crate::training::{SeedPolicy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    /// Any of these replaces the variant's value.
    pub dim: Option<usize>,
    pub enc_depth: Option<usize>,
    pub dec_depth: Option<usize>,
    pub heads: Option<usize>,
    pub ffb_mult: Option<usize>,
    pub mode: Mode,
    pub shared_encoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            dim: None,
            enc_depth: None,
            dec_depth: None,
            heads: None,
            ffb_mult: None,
            mode: Mode::StMae,
            shared_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub name: Arch,
    /// `random`, `random:<seed>` or a safetensors file.
    pub weights: String,
    /// Empty selects the backbone's default taps.
    pub taps: Vec<String>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            name: Arch::Vgg19,
            weights: "random".into(),
            taps: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSection {
    /// Square side images are resized to.
    pub size: usize,
}

impl Default for ImageSection {
    fn default() -> Self {
        Self { size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfdfSection {
    pub size: usize,
}

impl Default for PfdfSection {
    fn default() -> Self {
        Self { size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FptdSection {
    pub patch_size: usize,
    pub seed_policy: SeedPolicy,
}

impl Default for FptdSection {
    fn default() -> Self {
        Self {
            patch_size: 4,
            seed_policy: SeedPolicy::FreshPerStep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: String,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    /// Residuals used for both the objective and the anomaly map.
    pub modality: LossModality,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            modality: LossModality::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub sigma: f64,
    /// Only `multiply` is implemented.
    pub fusion: String,
    /// Only `std` is implemented.
    pub image_stat: String,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            fusion: "multiply".into(),
            image_stat: "std".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub layout: Layout,
    pub root: Option<PathBuf>,
    /// MVTec category; absent means every category under the root.
    pub category: Option<String>,
    /// Normal class of a folder dataset.
    pub normal_class: Option<String>,
    /// Keep only this many training images.
    pub few_shot: Option<usize>,
    pub few_shot_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            layout: Layout::Synthetic,
            root: None,
            category: None,
            normal_class: None,
            few_shot: None,
            few_shot_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub backbone: BackboneSection,
    pub image: ImageSection,
    pub pfdf: PfdfSection,
    pub normalize: Normalization,
    pub fptd: FptdSection,
    pub training: TrainingSection,
    pub loss: LossSection,
    pub score: ScoreSection,
    pub eval: EvalConfig,
    pub data: DataSection,
    pub synth: SynthSpec,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(config_err!("override key `{key}` must look like section.key"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err!("`{p}` in override `{key}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Small setting that trains on the generated benchmark in minutes on
    /// one CPU core.
    pub fn desk() -> Self {
        Self {
            model: ModelSection {
                variant: Variant::Nano,
                ..ModelSection::default()
            },
            image: ImageSection { size: 64 },
            pfdf: PfdfSection { size: 16 },
            fptd: FptdSection {
                patch_size: 2,
                ..FptdSection::default()
            },
            training: TrainingSection {
                lr: 1e-3,
                epochs: 30,
                ..TrainingSection::default()
            },
            ..Self::default()
        }
    }

    /// Builds from a TOML document over `base`, applies `key=value`
    /// overrides, then validates.
    pub fn resolve(base: &RunConfig, document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(base).map_err(|e| Error::Invariant(e.to_string()))?;
        if let Some(doc) = document {
            let user: Table = doc.parse().map_err(|e| config_err!("config file: {e}"))?;
            merge(&mut table, user);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err!("override `{o}` must look like section.key=value"))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read config `{}`: {e}", path.display()))?;
        Self::resolve(base, Some(&text), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let base = ModelConfig::from_variant(m.variant, self.fptd.patch_size);
        ModelConfig {
            dim: m.dim.unwrap_or(base.dim),
            enc_depth: m.enc_depth.unwrap_or(base.enc_depth),
            dec_depth: m.dec_depth.unwrap_or(base.dec_depth),
            heads: m.heads.unwrap_or(base.heads),
            ffb_mult: m.ffb_mult.unwrap_or(base.ffb_mult),
            mode: m.mode,
            shared_encoder: m.shared_encoder,
            ..base
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            backbone: self.backbone.name,
            weights: self.backbone.weights.clone(),
            taps: self.backbone.taps.clone(),
            input_size: self.image.size,
            pfdf_size: self.pfdf.size,
            normalization: self.normalize,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            optimizer: t.optimizer.clone(),
            weight_decay: t.weight_decay,
            seed: t.seed,
            lambda: self.loss.lambda,
            modality: self.loss.modality,
            seed_policy: self.fptd.seed_policy,
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            sigma: self.score.sigma,
            modality: self.loss.modality,
        }
    }

    /// Checks every section; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, e: Error| match e {
            Error::Config(m) => config_err!("{key}: {m}"),
            other => other,
        };
        self.model_config().validate().map_err(|e| named("model", e))?;
        self.train_config().validate()?;
        self.eval.validate()?;
        if self.image.size == 0 {
            return Err(config_err!("image.size must be positive"));
        }
        if self.pfdf.size == 0 || self.pfdf.size > self.image.size {
            return Err(config_err!(
                "pfdf.size must be between 1 and image.size ({}), got {}",
                self.image.size,
                self.pfdf.size
            ));
        }
        let p = self.pfdf.size;
        GridShape::new(p, p, 1, self.fptd.patch_size).map_err(|e| named("fptd.patch_size", e))?;
        if !(self.score.sigma >= 0.0) {
            return Err(config_err!("score.sigma must be non-negative"));
        }
        if self.score.fusion != "multiply" {
            return Err(config_err!("score.fusion `{}` is not supported (only multiply)", self.score.fusion));
        }
        if self.score.image_stat != "std" {
            return Err(config_err!("score.image_stat `{}` is not supported (only std)", self.score.image_stat));
        }
        if self.normalize.std.iter().any(|&s| !(s > 0.0)) {
            return Err(config_err!("normalize.std entries must be positive"));
        }
        if self.backbone.name != Arch::Pixel && !self.backbone.weights.starts_with("random") {
            let p = Path::new(&self.backbone.weights);
            if !p.is_file() {
                return Err(config_err!("backbone.weights: file `{}` does not exist", p.display()));
            }
        }
        match self.data.layout {
            Layout::Synthetic => self.synth.validate()?,
            layout => {
                let root = self
                    .data
                    .root
                    .as_ref()
                    .ok_or_else(|| config_err!("data.root is required for the {layout:?} layout"))?;
                if !root.is_dir() {
                    return Err(config_err!("data.root: directory `{}` does not exist", root.display()));
                }
                if layout == Layout::Folder && self.data.normal_class.is_none() {
                    return Err(config_err!("data.normal_class is required for the folder layout"));
                }
            }
        }
        if self.data.few_shot == Some(0) {
            return Err(config_err!("data.few_shot must be at least 1"));
        }
        Ok(())
    }
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            cfg.validate().unwrap();
            let back = RunConfig::resolve(&RunConfig::default(), Some(&cfg.to_toml()), &[]).unwrap();
            assert_eq!(back, cfg);
        }
        let d = RunConfig::default();
        assert_eq!((d.image.size, d.pfdf.size, d.fptd.patch_size), (256, 64, 4));
        assert_eq!((d.loss.lambda, d.score.sigma, d.eval.tta_rounds), (5.0, 4.0, 1));
    }

    #[test]
    fn overrides_win_over_the_document() {
        let doc = "[training]\nepochs = 7\nlr = 0.01\n";
        let cfg = RunConfig::resolve(
            &RunConfig::desk(),
            Some(doc),
            &["training.epochs=1".into(), "model.mode=ae".into(), "backbone.taps=[\"relu1_2\"]".into()],
        )
        .unwrap();
        assert_eq!((cfg.training.epochs, cfg.training.lr), (1, 0.01));
        assert_eq!(cfg.model.mode, Mode::Ae);
        assert_eq!(cfg.backbone.taps, ["relu1_2"]);
        assert!(cfg.to_toml().contains("epochs = 1"));
    }

    #[test]
    fn variant_fields_can_be_replaced() {
        let cfg = RunConfig::resolve(&RunConfig::desk(), None, &["model.dim=64".into()]).unwrap();
        let m = cfg.model_config();
        assert_eq!((m.dim, m.enc_depth, m.heads, m.patch), (64, 2, 4, 2));
    }

    #[test]
    fn errors_name_the_key() {
        let err = |o: &str| RunConfig::resolve(&RunConfig::desk(), None, &[o.to_string()]).unwrap_err().to_string();
        assert!(err("training.epochz=3").contains("epochz"));
        assert!(err("training.epochs=0").contains("training.epochs"));
        assert!(err("fptd.patch_size=3").contains("fptd.patch_size"));
        assert!(err("score.fusion=add").contains("score.fusion"));
        assert!(err("data.layout=mvtec").contains("data.root"));
        let e = RunConfig::resolve(
            &RunConfig::desk(),
            None,
            &["data.layout=mvtec".into(), "data.root=/nonexistent/x".into()],
        )
        .unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("data.root")));
        assert!(err("nokey").contains("section.key=value"));
        assert!(err("training=3").contains("section.key"));
    }

    #[test]
    fn bad_document_is_a_config_error() {
        assert!(matches!(
            RunConfig::resolve(&RunConfig::default(), Some("[model\n"), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(&RunConfig::default(), Some("[mystery]\na = 1\n"), &[]),
            Err(Error::Config(_))
        ));
    }
}
