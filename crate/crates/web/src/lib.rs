//! Browser bindings: a decoupling explorer, the synthetic texture generator
//! and a small pixel-level detector trained in the page.

use ndarray::{Array2, Axis};
use stmae::data::{synth_generate, AnomalyKind, Dataset, SynthSpec};
use stmae::evaluation::{EvalConfig, Scorer};
use stmae::fptd::{decouple_indices, unfold, GridShape};
use stmae::lpsr::{Arch, FeatureConfig, FeatureExtractor, Pfdf};
use stmae::model::{placement, Mode, ModelConfig, StMae, Variant};
use stmae::residuals::ScoreConfig;
use stmae::training::{sample_seed, training_step, AdamW, TrainConfig};
use wasm_bindgen::prelude::*;

fn js(e: stmae::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_mode(s: &str) -> stmae::Result<Mode> {
    match s {
        "stmae" => Ok(Mode::StMae),
        "smae" => Ok(Mode::SMae),
        "ae" => Ok(Mode::Ae),
        other => Err(stmae::Error::Config(format!("unknown mode `{other}`"))),
    }
}

fn parse_kind(s: &str) -> stmae::Result<Option<AnomalyKind>> {
    match s {
        "good" => Ok(None),
        k => k.parse().map(Some),
    }
}

/// For each of `n` token positions: `[subset, destination]`, flattened.
/// `subset` is 0 or 1; `destination` is where that token's latent is
/// decoded under `mode` (its own position unless the halves are swapped).
#[wasm_bindgen]
pub fn decouple(n: usize, seed: u64, mode: &str) -> Result<Vec<u32>, JsError> {
    decouple_map(n, seed, mode).map_err(js)
}

fn decouple_map(n: usize, seed: u64, mode: &str) -> stmae::Result<Vec<u32>> {
    let mode = parse_mode(mode)?;
    let (first, second) = decouple_indices(n, seed)?;
    let dest = placement(mode, &first, &second);
    let mut out = vec![0u32; 2 * n];
    for (row, &src) in first.iter().chain(&second).enumerate() {
        out[2 * src] = u32::from(row >= first.len());
        out[2 * src + 1] = dest[row] as u32;
    }
    Ok(out)
}

fn rgba(img: &image::RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// A generated image with its defect mask, both row-major.
#[wasm_bindgen]
pub struct Sample {
    size: usize,
    rgba: Vec<u8>,
    mask: Vec<u8>,
}

#[wasm_bindgen]
impl Sample {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA bytes, ready for `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// One byte per pixel, 255 inside the defect.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
}

fn one_sample(kind: Option<AnomalyKind>, seed: u64, size: usize) -> stmae::Result<(Dataset, usize)> {
    let spec = SynthSpec {
        resolution: size,
        train: 1,
        test_normal: usize::from(kind.is_none()),
        test_anomalous: usize::from(kind.is_some()),
        anomaly_types: kind.into_iter().collect(),
        seed,
    };
    Ok((synth_generate(&spec)?, 0))
}

/// Texture sample; `kind` is `good`, `blob-intensity`, `patch-swap` or
/// `semantic-swap`.
#[wasm_bindgen]
pub fn synth_sample(kind: &str, seed: u64, size: usize) -> Result<Sample, JsError> {
    make_sample(kind, seed, size).map_err(js)
}

fn make_sample(kind: &str, seed: u64, size: usize) -> stmae::Result<Sample> {
    let (ds, i) = one_sample(parse_kind(kind)?, seed, size)?;
    let item = &ds.test_items[i];
    let img = item.image.load()?;
    let mask = match &item.mask {
        Some(m) => m.load()?.into_raw(),
        None => vec![0; size * size],
    };
    Ok(Sample {
        size,
        rgba: rgba(&img),
        mask,
    })
}

const DEMO_SIZE: usize = 32;
const DEMO_PFDF: usize = 16;

/// Pixel-level detector trained step by step on synthetic normals.
#[wasm_bindgen]
pub struct Detector {
    extractor: FeatureExtractor,
    model: StMae<f32>,
    optimizer: AdamW<f32>,
    cfg: TrainConfig,
    patches: Vec<Array2<f32>>,
    step: u64,
}

impl Detector {
    fn build(mode: &str, patch: usize, train: usize, seed: u64) -> stmae::Result<Self> {
        let mode = parse_mode(mode)?;
        let extractor = FeatureConfig {
            backbone: Arch::Pixel,
            input_size: DEMO_SIZE,
            pfdf_size: DEMO_PFDF,
            ..FeatureConfig::default()
        }
        .build()?;
        let spec = SynthSpec {
            resolution: DEMO_SIZE,
            train,
            test_normal: 0,
            test_anomalous: 0,
            seed,
            ..SynthSpec::default()
        };
        let feats: Vec<Pfdf> = synth_generate(&spec)?
            .train_items
            .iter()
            .map(|t| extractor.extract_image(&t.image.load()?, &t.id))
            .collect::<stmae::Result<_>>()?;
        let (h, w, c) = feats[0].dim();
        let grid = GridShape::new(h, w, c, patch)?;
        let model_cfg = ModelConfig {
            dim: 32,
            heads: 4,
            mode,
            ..ModelConfig::from_variant(Variant::Nano, patch)
        };
        let cfg = TrainConfig {
            lr: 2e-3,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(Detector {
            model: StMae::new(model_cfg, grid, seed)?,
            optimizer: AdamW::new(cfg.lr, cfg.weight_decay),
            patches: feats.iter().map(|f| unfold(f.data.view(), grid)).collect(),
            extractor,
            cfg,
            step: 0,
        })
    }

    fn run(&mut self, count: usize) -> stmae::Result<f64> {
        let b = self.cfg.batch_size.min(self.patches.len());
        let mut total = 0.0;
        for _ in 0..count {
            let start = (self.step as usize * b) % self.patches.len();
            let views: Vec<_> = (0..b).map(|i| self.patches[(start + i) % self.patches.len()].view()).collect();
            let batch = ndarray::concatenate(Axis(0), &views).expect("equal widths");
            let seeds: Vec<u64> = (0..b).map(|i| sample_seed(self.cfg.seed, self.step, i)).collect();
            let loss = training_step(&mut self.model, &mut self.optimizer, &batch, b, &seeds, &self.cfg, self.step)?;
            total += loss.total;
            self.step += 1;
        }
        Ok(total / count.max(1) as f64)
    }

    fn localize(&self, kind: &str, seed: u64) -> stmae::Result<Vec<f32>> {
        let (ds, i) = one_sample(parse_kind(kind)?, seed, DEMO_SIZE)?;
        let item = &ds.test_items[i];
        let scorer = Scorer {
            extractor: &self.extractor,
            model: &self.model,
            score: ScoreConfig {
                sigma: 1.0,
                ..ScoreConfig::default()
            },
            eval: EvalConfig { tta_rounds: 2, seed },
        };
        let map = scorer.score_image(&item.image.load()?, &item.id)?;
        let (lo, hi) = map.map.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out: Vec<f32> = map.map.iter().map(|v| (v - lo) / span).collect();
        out.push(map.image_score as f32);
        Ok(out)
    }
}

#[wasm_bindgen]
impl Detector {
    /// `train` normal images, model in `mode` with patch side `patch`.
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, patch: usize, train: usize, seed: u64) -> Result<Detector, JsError> {
        Self::build(mode, patch, train, seed).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `count` optimizer steps; returns the mean loss over them.
    pub fn train(&mut self, count: usize) -> Result<f64, JsError> {
        self.run(count).map_err(js)
    }

    /// Scores one generated image (same `kind` names as [`synth_sample`]).
    /// Returns the anomaly map as `32²` values min-max scaled to [0, 1],
    /// followed by the image score.
    pub fn score(&self, kind: &str, seed: u64) -> Result<Vec<f32>, JsError> {
        self.localize(kind, seed).map_err(js)
    }
}
