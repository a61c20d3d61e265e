//! Scoring test sets and summarising the results.

pub mod metrics;

use std::fmt::Write as _;

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FrameRef, TestItem};
use crate::error::{config_err, Error, Result};
use crate::lpsr::{FeatureExtractor, Pfdf};
use crate::model::StMae;
use crate::residuals::{score_reconstructions, AnomalyMap, ScoreConfig};
use crate::rng::{derive_seed, stream};

pub use metrics::{auroc, average_precision, f1_accuracy, OperatingPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoupling draws averaged per test image.
    pub tta_rounds: usize,
    /// Base seed of the test-time decoupling draws.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tta_rounds: 1, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tta_rounds == 0 {
            return Err(config_err!("eval.tta_rounds must be at least 1"));
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Decoupling seed of one test image. Depends on the image id, so a result
/// does not change with the order or subset of images scored.
pub fn tta_seed(base: u64, id: &str, round: usize) -> u64 {
    derive_seed(base, &[stream::EVAL, fnv1a(id.as_bytes()), round as u64])
}

/// Hash of every model parameter, for tying reports to weights.
pub fn model_fingerprint(model: &StMae<f32>) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    model.visit(&mut |name, _, values| {
        h ^= fnv1a(name.as_bytes());
        for v in values {
            h = (h ^ v.to_bits() as u64).wrapping_mul(0x0100_0000_01b3);
        }
    });
    format!("{h:016x}")
}

/// Feature extractor and trained model bound together for scoring.
pub struct Scorer<'a> {
    pub extractor: &'a FeatureExtractor,
    pub model: &'a StMae<f32>,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
}

impl Scorer<'_> {
    pub fn map_size(&self) -> (usize, usize) {
        (self.extractor.input_size, self.extractor.input_size)
    }

    pub fn score_pfdf(&self, pfdf: &Pfdf, id: &str) -> Result<AnomalyMap> {
        self.eval.validate()?;
        let recons = (0..self.eval.tta_rounds)
            .map(|r| self.model.forward(pfdf, tta_seed(self.eval.seed, id, r)))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = recons.iter().map(|c| c.data.view()).collect();
        score_reconstructions(&views, pfdf.data.view(), self.map_size(), &self.score)
    }

    pub fn score_image(&self, img: &RgbImage, id: &str) -> Result<AnomalyMap> {
        self.score_pfdf(&self.extractor.extract_image(img, id)?, id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageResult {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub frame: Option<FrameRef>,
}

pub const SCORES_HEADER: &str = "id,label,score,clip,frame";

pub fn scores_csv(results: &[ImageResult]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for r in results {
        let (clip, frame) = r
            .frame
            .as_ref()
            .map_or((String::new(), String::new()), |f| (f.clip.clone(), f.index.to_string()));
        writeln!(out, "{},{},{},{clip},{frame}", r.id, r.label, r.score).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub category: String,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub pixel_auroc: Option<f64>,
    pub pixel_ap: Option<f64>,
    pub f1: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub n_images: usize,
    pub n_anomalous: usize,
    pub n_pixels: usize,
    pub tta_rounds: usize,
    pub fingerprint: String,
}

pub const METRICS_HEADER: &str =
    "category,image_auroc,image_ap,pixel_auroc,pixel_ap,f1,accuracy,threshold,n_images,n_anomalous,n_pixels,tta_rounds,fingerprint";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{:.6},{:.6},{},{},{},{},{},{}",
            self.category,
            self.image_auroc,
            self.image_ap,
            opt(self.pixel_auroc),
            opt(self.pixel_ap),
            self.f1,
            self.accuracy,
            self.threshold,
            self.n_images,
            self.n_anomalous,
            self.n_pixels,
            self.tta_rounds,
            self.fingerprint
        )
    }

    pub fn summary(&self) -> String {
        let pixel = match (self.pixel_auroc, self.pixel_ap) {
            (Some(a), Some(p)) => format!("  pixel AUROC {a:.4}  pixel AP {p:.4}"),
            _ => String::new(),
        };
        format!(
            "{}: image AUROC {:.4}  AP {:.4}{pixel}  F1 {:.4}  acc {:.4}  ({} images, {} anomalous)",
            self.category, self.image_auroc, self.image_ap, self.f1, self.accuracy, self.n_images, self.n_anomalous
        )
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub images: Vec<ImageResult>,
}

/// Ground truth resized to the map resolution; missing masks are all normal.
pub fn mask_for(item: &TestItem, size: (usize, usize)) -> Result<Array2<bool>> {
    let (h, w) = size;
    let Some(src) = &item.mask else {
        return Ok(Array2::from_elem((h, w), false));
    };
    let mask = src.load()?;
    let resized: GrayImage = if mask.dimensions() == (w as u32, h as u32) {
        mask
    } else {
        imageops::resize(&mask, w as u32, h as u32, FilterType::Nearest)
    };
    Ok(Array2::from_shape_fn((h, w), |(y, x)| resized.get_pixel(x as u32, y as u32)[0] > 127))
}

/// Features of every test item, in dataset order.
pub fn extract_test_features(fx: &FeatureExtractor, ds: &Dataset) -> Result<Vec<Pfdf>> {
    ds.test_items
        .iter()
        .map(|t| fx.extract_image(&t.image.load()?, &t.id))
        .collect()
}

/// Scores every test item. `on_map` sees each map as it is produced, so
/// callers can write heatmaps without holding all of them.
pub fn evaluate_dataset(
    scorer: &Scorer<'_>,
    ds: &Dataset,
    on_map: &mut dyn FnMut(&TestItem, &AnomalyMap) -> Result<()>,
) -> Result<Evaluation> {
    let feats = extract_test_features(scorer.extractor, ds)?;
    evaluate_features(scorer, ds, &feats, on_map)
}

/// As [`evaluate_dataset`] with the test features already extracted.
pub fn evaluate_features(
    scorer: &Scorer<'_>,
    ds: &Dataset,
    features: &[Pfdf],
    on_map: &mut dyn FnMut(&TestItem, &AnomalyMap) -> Result<()>,
) -> Result<Evaluation> {
    if ds.test_items.is_empty() {
        return Err(Error::UndefinedMetric(format!("category `{}` has no test images", ds.category)));
    }
    if features.len() != ds.test_items.len() {
        return Err(crate::error::invalid_input!(
            "{} feature maps for {} test items",
            features.len(),
            ds.test_items.len()
        ));
    }
    let size = scorer.map_size();
    let mut images = Vec::with_capacity(ds.test_items.len());
    let mut pix_scores: Vec<f64> = Vec::new();
    let mut pix_labels: Vec<bool> = Vec::new();
    for (item, pfdf) in ds.test_items.iter().zip(features) {
        let map = scorer.score_pfdf(pfdf, &item.id)?;
        if ds.has_masks {
            let mask = mask_for(item, size)?;
            pix_scores.extend(map.map.iter().map(|&v| v as f64));
            pix_labels.extend(mask.iter().copied());
        }
        on_map(item, &map)?;
        images.push(ImageResult {
            id: item.id.clone(),
            label: item.label,
            score: map.image_score,
            frame: item.frame.clone(),
        });
    }
    let scores: Vec<f64> = images.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = images.iter().map(|r| r.label == 1).collect();
    let op = f1_accuracy(&scores, &labels)?;
    let (pixel_auroc, pixel_ap) = if pix_labels.iter().any(|&l| l) {
        (
            Some(auroc(&pix_scores, &pix_labels)?),
            Some(average_precision(&pix_scores, &pix_labels)?),
        )
    } else {
        if ds.has_masks {
            log::warn!("no anomalous pixels in `{}`; pixel metrics skipped", ds.category);
        }
        (None, None)
    };
    let report = MetricsReport {
        category: ds.category.clone(),
        image_auroc: auroc(&scores, &labels)?,
        image_ap: average_precision(&scores, &labels)?,
        pixel_auroc,
        pixel_ap,
        f1: op.f1,
        accuracy: op.accuracy,
        threshold: op.threshold,
        n_images: images.len(),
        n_anomalous: labels.iter().filter(|&&l| l).count(),
        n_pixels: pix_labels.len(),
        tta_rounds: scorer.eval.tta_rounds,
        fingerprint: model_fingerprint(scorer.model),
    };
    Ok(Evaluation { report, images })
}

/// Mean of every numeric column over several categories.
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
    };
    Some(MetricsReport {
        category: "mean".into(),
        image_auroc: mean(&|r| r.image_auroc),
        image_ap: mean(&|r| r.image_ap),
        pixel_auroc: mean_opt(&|r| r.pixel_auroc),
        pixel_ap: mean_opt(&|r| r.pixel_ap),
        f1: mean(&|r| r.f1),
        accuracy: mean(&|r| r.accuracy),
        threshold: f64::NAN,
        n_images: reports.iter().map(|r| r.n_images).sum(),
        n_anomalous: reports.iter().map(|r| r.n_anomalous).sum(),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
        tta_rounds: first.tta_rounds,
        fingerprint: String::new(),
    })
}
