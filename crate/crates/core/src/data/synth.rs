//! Generated benchmark: a fixed sinusoidal texture with small per-image
//! jitter, and anomalies with exact pixel masks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSource, Layout, MaskSource, TestItem, TrainItem};
use crate::error::{config_err, Error, Result};
use crate::rng::{self, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// A disk brightened or darkened by a fixed offset.
    #[serde(rename = "blob-intensity")]
    Blob,
    /// A square copied from a distant part of the same image.
    PatchSwap,
    /// A square replaced by a foreign stripe texture.
    SemanticSwap,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Blob, AnomalyKind::PatchSwap, AnomalyKind::SemanticSwap];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Blob => "blob-intensity",
            AnomalyKind::PatchSwap => "patch-swap",
            AnomalyKind::SemanticSwap => "semantic-swap",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err!("unknown anomaly type `{s}` (expected blob-intensity, patch-swap or semantic-swap)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub resolution: usize,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub anomaly_types: Vec<AnomalyKind>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            train: 200,
            test_normal: 50,
            test_anomalous: 50,
            anomaly_types: AnomalyKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(config_err!("synth.resolution must be at least 32, got {}", self.resolution));
        }
        if self.train == 0 {
            return Err(config_err!("synth.train must be positive"));
        }
        if self.test_anomalous > 0 && self.anomaly_types.is_empty() {
            return Err(config_err!("synth.anomaly_types is empty but anomalous images were requested"));
        }
        Ok(())
    }
}

/// `(fx, fy, phase, colour)` of the texture components.
const COMPONENTS: [(f64, f64, f64, [f64; 3]); 4] = [
    (2.0, 1.0, 0.0, [0.5, 0.2, 0.1]),
    (1.0, 3.0, 1.0, [0.1, 0.4, 0.2]),
    (3.0, 2.0, 2.0, [0.2, 0.1, 0.5]),
    (0.0, 4.0, 0.5, [0.3, 0.3, 0.1]),
];

/// Planar `3 × r × r` float image.
pub(super) fn normal_image(rng: &mut Rng, r: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((3, r, r));
    let rf = r as f64;
    for (fx, fy, ph, col) in COMPONENTS {
        let p = ph + Normal::new(0.0, 0.15).unwrap().sample(rng);
        let a = 1.0 + Normal::new(0.0, 0.1).unwrap().sample(rng);
        for y in 0..r {
            for x in 0..r {
                let s = a * (2.0 * PI * (fx * x as f64 / rf + fy * y as f64 / rf) + p).sin();
                for c in 0..3 {
                    img[[c, y, x]] += col[c] * s;
                }
            }
        }
    }
    // Smoothed noise: a 5×5 box filter over zero-padded white noise.
    let white = Array3::<f64>::from_shape_simple_fn((3, r, r), || StandardNormal.sample(rng));
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                let mut acc = 0.0;
                for yy in y.saturating_sub(2)..(y + 3).min(r) {
                    for xx in x.saturating_sub(2)..(x + 3).min(r) {
                        acc += white[[c, yy, xx]];
                    }
                }
                img[[c, y, x]] += acc / 25.0 * 0.3;
            }
        }
    }
    img.mapv_inplace(|v| 0.5 + 0.25 * v);
    img
}

/// Applies one anomaly in place and returns its mask (row-major `r × r`).
pub(super) fn apply_anomaly(rng: &mut Rng, img: &mut Array3<f64>, kind: AnomalyKind) -> Vec<bool> {
    let r = img.shape()[1];
    let scale = r as f64 / 64.0;
    let sc = |v: f64| (v * scale).round() as usize;
    let mut mask = vec![false; r * r];
    match kind {
        AnomalyKind::Blob => {
            let cy = rng.random_range(sc(12.0)..sc(52.0)) as f64;
            let cx = rng.random_range(sc(12.0)..sc(52.0)) as f64;
            let rad = rng.random_range(sc(5.0)..sc(10.0)) as f64;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for y in 0..r {
                for x in 0..r {
                    if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad {
                        mask[y * r + x] = true;
                        for c in 0..3 {
                            img[[c, y, x]] += sign * 0.35;
                        }
                    }
                }
            }
        }
        AnomalyKind::PatchSwap => {
            let s = rng.random_range(sc(10.0)..sc(18.0));
            let min_dist = sc(24.0);
            let (ty, tx, sy, sx) = loop {
                let v: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..r - s));
                if v[0].abs_diff(v[2]) + v[1].abs_diff(v[3]) > min_dist {
                    break (v[0], v[1], v[2], v[3]);
                }
            };
            let src = img.clone();
            for y in 0..s {
                for x in 0..s {
                    mask[(ty + y) * r + tx + x] = true;
                    for c in 0..3 {
                        img[[c, ty + y, tx + x]] = src[[c, sy + y, sx + x]];
                    }
                }
            }
        }
        AnomalyKind::SemanticSwap => {
            let s = rng.random_range(sc(10.0)..sc(18.0));
            let ty = rng.random_range(0..r - s);
            let tx = rng.random_range(0..r - s);
            let f = rng.random_range(6.0..10.0);
            let th: f64 = rng.random_range(0.0..PI);
            for y in ty..ty + s {
                for x in tx..tx + s {
                    mask[y * r + x] = true;
                    let u = th.cos() * x as f64 / r as f64 + th.sin() * y as f64 / r as f64;
                    let v = 0.5 + 0.3 * (2.0 * PI * f * u).sin();
                    for c in 0..3 {
                        img[[c, y, x]] = v;
                    }
                }
            }
        }
    }
    mask
}

fn to_rgb(img: &Array3<f64>) -> RgbImage {
    let r = img.shape()[1];
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn to_mask(mask: &[bool], r: usize) -> GrayImage {
    GrayImage::from_fn(r as u32, r as u32, |x, y| Luma([if mask[y as usize * r + x as usize] { 255 } else { 0 }]))
}

/// Builds the benchmark. Training images are all normal; anomalous test
/// items carry the exact mask of the pixels that were altered.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let r = spec.resolution;
    let mut rng = rng::rng(rng::derive_seed(spec.seed, &[stream::SYNTH]));
    let train_items = (0..spec.train)
        .map(|i| TrainItem {
            id: format!("train/good/{i:04}"),
            image: ImageSource::Memory(Arc::new(to_rgb(&normal_image(&mut rng, r)))),
        })
        .collect();
    let mut test_items = Vec::with_capacity(spec.test_normal + spec.test_anomalous);
    for i in 0..spec.test_normal {
        test_items.push(TestItem {
            id: format!("test/good/{i:04}"),
            image: ImageSource::Memory(Arc::new(to_rgb(&normal_image(&mut rng, r)))),
            label: 0,
            mask: Some(MaskSource::Memory(Arc::new(GrayImage::new(r as u32, r as u32)))),
            frame: None,
        });
    }
    for i in 0..spec.test_anomalous {
        let mut img = normal_image(&mut rng, r);
        let kind = *spec.anomaly_types.choose(&mut rng).expect("validated non-empty");
        let mask = apply_anomaly(&mut rng, &mut img, kind);
        test_items.push(TestItem {
            id: format!("test/{kind}/{i:04}"),
            image: ImageSource::Memory(Arc::new(to_rgb(&img))),
            label: 1,
            mask: Some(MaskSource::Memory(Arc::new(to_mask(&mask, r)))),
            frame: None,
        });
    }
    Ok(Dataset {
        category: "synthetic".into(),
        layout: Layout::Synthetic,
        train_items,
        test_items,
        has_masks: true,
    })
}
