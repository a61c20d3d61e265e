//! Pretrained-CNN feature extraction and multi-level fusion.
//!
//! An image is normalized with ImageNet statistics, pushed through a frozen
//! backbone, and the tapped feature maps are bilinearly resized to a common
//! grid and concatenated along channels. The fused map is the target the
//! transformer learns to reconstruct.

pub mod backbone;
pub mod conv;

use image::{imageops::FilterType, RgbImage};
use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

pub use backbone::{Arch, BackboneHandle, WeightsSource};

use crate::error::{config_err, invalid_input, Result};
use crate::interp::resize_bilinear;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Normalized `H×W×3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub id: String,
}

/// Resizes an 8-bit RGB grid to `size×size` and applies
/// `(x/255 − mean_c) / std_c` per channel.
pub fn normalize_image(raw: ArrayView3<u8>, size: usize, norm: &Normalization, id: &str) -> Result<ImageTensor> {
    let (h, w, c) = raw.dim();
    if c != 3 {
        return Err(invalid_input!("image `{id}` has {c} channels, expected 3"));
    }
    if h == 0 || w == 0 {
        return Err(invalid_input!("image `{id}` is empty"));
    }
    let resized;
    let src = if (h, w) == (size, size) {
        raw
    } else {
        let buf = RgbImage::from_raw(w as u32, h as u32, raw.iter().copied().collect())
            .expect("buffer length matches dims");
        let img = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        resized = Array3::from_shape_vec((size, size, 3), img.into_raw()).expect("resized dims");
        resized.view()
    };
    let data = Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
        (src[[y, x, ch]] as f32 / 255.0 - norm.mean[ch]) / norm.std[ch]
    });
    Ok(ImageTensor { data, id: id.to_string() })
}

pub fn image_to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone()).expect("rgb buffer")
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalFeatures {
    /// One map per tap, shallow to deep.
    pub levels: Vec<Array3<f32>>,
}

impl HierarchicalFeatures {
    pub fn hierarchy_count(&self) -> usize {
        self.levels.len()
    }
}

pub fn extract_hierarchy(image: &ImageTensor, backbone: &BackboneHandle) -> HierarchicalFeatures {
    HierarchicalFeatures {
        levels: backbone.forward(image.data.view()),
    }
}

/// Fused multi-level feature map, `H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfdf {
    pub data: Array3<f32>,
    pub source: String,
}

impl Pfdf {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Resizes every level to `target` and concatenates them channel-wise in
/// level order.
pub fn fuse_pfdf(features: &HierarchicalFeatures, target: (usize, usize), source: &str) -> Result<Pfdf> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(config_err!("fusion size must be positive, got {th}x{tw}"));
    }
    if features.levels.is_empty() {
        return Err(invalid_input!("no feature levels to fuse"));
    }
    let resized: Vec<Array3<f32>> = features
        .levels
        .iter()
        .map(|l| resize_bilinear(l.view(), th, tw))
        .collect();
    let data = conv::concat_channels(&resized);
    debug_assert_eq!(
        data.dim().2,
        features.levels.iter().map(|l| l.dim().2).sum::<usize>()
    );
    Ok(Pfdf {
        data,
        source: source.to_string(),
    })
}

/// Which feature levels feed the fused map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hierarchy {
    /// The normalized image, no network.
    Pixel,
    /// The shallower half of the default taps.
    Shallow,
    /// The deeper half of the default taps.
    Deep,
    /// All default taps.
    Full,
}

impl Hierarchy {
    pub const ALL: [Hierarchy; 4] = [Hierarchy::Pixel, Hierarchy::Shallow, Hierarchy::Deep, Hierarchy::Full];

    pub fn name(self) -> &'static str {
        match self {
            Hierarchy::Pixel => "pixel",
            Hierarchy::Shallow => "s-feature",
            Hierarchy::Deep => "d-feature",
            Hierarchy::Full => "pfdf",
        }
    }

    /// Backbone and taps realizing this level set on top of `arch`.
    pub fn resolve(self, arch: Arch) -> (Arch, Vec<String>) {
        let taps = arch.default_taps();
        let half = taps.len() / 2;
        match self {
            Hierarchy::Pixel => (Arch::Pixel, Arch::Pixel.default_taps()),
            Hierarchy::Shallow => (arch, taps[..half.max(1)].to_vec()),
            Hierarchy::Deep => (arch, taps[half..].to_vec()),
            Hierarchy::Full => (arch, taps),
        }
    }
}

impl std::str::FromStr for Hierarchy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Hierarchy::ALL
            .into_iter()
            .find(|h| h.name() == key)
            .ok_or_else(|| config_err!("unknown hierarchy `{s}` (expected pixel, s-feature, d-feature or pfdf)"))
    }
}

/// Serializable description of a [`FeatureExtractor`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub backbone: Arch,
    /// `random`, `random:<seed>` or a safetensors path.
    pub weights: String,
    /// Empty means the backbone's default taps.
    #[serde(default)]
    pub taps: Vec<String>,
    pub input_size: usize,
    pub pfdf_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            backbone: Arch::Vgg19,
            weights: "random".into(),
            taps: Vec::new(),
            input_size: 256,
            pfdf_size: 64,
            normalization: Normalization::default(),
        }
    }
}

impl FeatureConfig {
    pub fn build(&self) -> Result<FeatureExtractor> {
        let weights = WeightsSource::parse(&self.weights)?;
        let backbone = BackboneHandle::load(self.backbone, &weights, &self.taps)?;
        FeatureExtractor::new(backbone, self.input_size, self.pfdf_size, self.normalization)
    }
}

/// Backbone plus the preprocessing and fusion settings around it.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub backbone: BackboneHandle,
    pub input_size: usize,
    pub pfdf_size: usize,
    pub norm: Normalization,
}

impl FeatureExtractor {
    pub fn new(backbone: BackboneHandle, input_size: usize, pfdf_size: usize, norm: Normalization) -> Result<Self> {
        if input_size == 0 || pfdf_size == 0 {
            return Err(config_err!("input and fusion sizes must be positive"));
        }
        Ok(Self {
            backbone,
            input_size,
            pfdf_size,
            norm,
        })
    }

    pub fn channels(&self) -> usize {
        self.backbone.total_channels()
    }

    pub fn extract(&self, raw: ArrayView3<u8>, id: &str) -> Result<Pfdf> {
        let img = normalize_image(raw, self.input_size, &self.norm, id)?;
        let levels = extract_hierarchy(&img, &self.backbone);
        fuse_pfdf(&levels, (self.pfdf_size, self.pfdf_size), id)
    }

    pub fn extract_image(&self, img: &RgbImage, id: &str) -> Result<Pfdf> {
        self.extract(image_to_array(img).view(), id)
    }
}
