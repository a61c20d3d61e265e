//! Frozen CNN feature extractors.
//!
//! Parameter names follow the torchvision state-dict conventions
//! (`features.0.weight`, `layer1.0.bn1.running_mean`, ...) so converted
//! ImageNet checkpoints in safetensors format load directly. A seeded random
//! initialization is available when no pretrained weights are at hand.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array3, ArrayView3};
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};

use super::conv::{self, BatchNorm, Conv2d, ConvSpec};
use crate::error::{config_err, Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arch {
    Vgg19,
    ResNet34,
    ResNet50,
    MobileNetV2,
    /// No network: the normalized image itself is the only level.
    Pixel,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Vgg19 => "vgg19",
            Arch::ResNet34 => "resnet34",
            Arch::ResNet50 => "resnet50",
            Arch::MobileNetV2 => "mobilenet_v2",
            Arch::Pixel => "pixel",
        }
    }

    /// Outputs of the first four convolutional stages, shallow to deep.
    pub fn default_taps(&self) -> Vec<String> {
        let taps: &[&str] = match self {
            Arch::Vgg19 => &["relu1_2", "relu2_2", "relu3_4", "relu4_4"],
            Arch::ResNet34 | Arch::ResNet50 => &["layer1", "layer2", "layer3", "layer4"],
            Arch::MobileNetV2 => &["features.1", "features.3", "features.6", "features.13"],
            Arch::Pixel => &["pixel"],
        };
        taps.iter().map(|t| t.to_string()).collect()
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Arch> for String {
    fn from(a: Arch) -> String {
        a.name().to_string()
    }
}

impl TryFrom<String> for Arch {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vgg19" => Ok(Arch::Vgg19),
            "resnet34" => Ok(Arch::ResNet34),
            "resnet50" => Ok(Arch::ResNet50),
            "mobilenet_v2" | "mobilenetv2" => Ok(Arch::MobileNetV2),
            "pixel" | "none" => Ok(Arch::Pixel),
            other => Err(config_err!("unknown backbone `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightsSource {
    /// A safetensors file with torchvision parameter names.
    File(PathBuf),
    /// He-normal initialization drawn from a seeded generator.
    Random { seed: u64 },
}

impl WeightsSource {
    /// Parses a config value: a path, or `random` / `random:<seed>`.
    pub fn parse(value: &str) -> Result<Self> {
        match value.strip_prefix("random") {
            Some("") => Ok(WeightsSource::Random { seed: 0 }),
            Some(rest) => rest
                .strip_prefix(':')
                .and_then(|s| s.parse().ok())
                .map(|seed| WeightsSource::Random { seed })
                .ok_or_else(|| config_err!("malformed random weights spec `{value}`")),
            None => Ok(WeightsSource::File(PathBuf::from(value))),
        }
    }
}

impl fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightsSource::File(p) => write!(f, "{}", p.display()),
            WeightsSource::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

trait ParamSource {
    fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool) -> Result<Conv2d>;
    fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm>;
}

struct RandomSource {
    rng: Rng,
}

impl ParamSource for RandomSource {
    fn conv(&mut self, _name: &str, spec: ConvSpec, bias: bool) -> Result<Conv2d> {
        // Kaiming normal, fan-out mode, as torchvision initializes these nets.
        let std = (2.0 / (spec.cout * spec.kernel * spec.kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights: Vec<f32> = (0..spec.weight_len())
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        let zeros = vec![0.0; spec.cout];
        Conv2d::from_oihw(spec, &weights, bias.then_some(zeros.as_slice()))
    }

    fn batch_norm(&mut self, _name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm::identity(channels))
    }
}

struct FileSource<'a> {
    path: &'a Path,
    tensors: SafeTensors<'a>,
}

impl FileSource<'_> {
    fn tensor(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let view = self
            .tensors
            .tensor(name)
            .map_err(|e| Error::load(self.path, format!("tensor `{name}`: {e}")))?;
        let data = view.data();
        let values: Vec<f32> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
                .collect(),
            other => {
                return Err(Error::load(
                    self.path,
                    format!("tensor `{name}` has dtype {other:?}; convert to float32"),
                ))
            }
        };
        if values.len() != len {
            return Err(Error::load(
                self.path,
                format!("tensor `{name}` has {} values, expected {len}", values.len()),
            ));
        }
        Ok(values)
    }
}

impl ParamSource for FileSource<'_> {
    fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool) -> Result<Conv2d> {
        let w = self.tensor(&format!("{name}.weight"), spec.weight_len())?;
        let b = if bias {
            Some(self.tensor(&format!("{name}.bias"), spec.cout)?)
        } else {
            None
        };
        Conv2d::from_oihw(spec, &w, b.as_deref())
    }

    fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let get = |suffix: &str| -> Result<Array1<f32>> {
            Ok(Array1::from(self.tensor(&format!("{name}.{suffix}"), channels)?))
        };
        Ok(BatchNorm {
            gamma: get("weight")?,
            beta: get("bias")?,
            mean: get("running_mean")?,
            var: get("running_var")?,
            eps: 1e-5,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    None,
    Relu,
    Relu6,
}

fn activate(x: Array3<f32>, act: Act) -> Array3<f32> {
    match act {
        Act::None => x,
        Act::Relu => conv::relu(x),
        Act::Relu6 => conv::relu6(x),
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    /// Convolutions with folded batch norms, applied in order with ReLU
    /// between them.
    convs: Vec<Conv2d>,
    downsample: Option<Conv2d>,
}

impl ResidualBlock {
    fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut y = x.to_owned();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(y.view());
            if i != last {
                y = conv::relu(y);
            }
        }
        let identity = match &self.downsample {
            Some(d) => d.forward(x),
            None => x.to_owned(),
        };
        conv::relu(conv::add(y, &identity))
    }
}

#[derive(Clone, Debug)]
struct InvertedResidual {
    /// `(conv, activation)` pairs: optional 1x1 expansion, 3x3 depthwise,
    /// linear 1x1 projection.
    convs: Vec<(Conv2d, Act)>,
    residual: bool,
}

impl InvertedResidual {
    fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut y = x.to_owned();
        for (c, act) in &self.convs {
            y = activate(c.forward(y.view()), *act);
        }
        if self.residual {
            y += &x;
        }
        y
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d, Act),
    Relu,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Residual(ResidualBlock),
    Inverted(InvertedResidual),
}

impl Layer {
    fn forward(&self, x: Array3<f32>) -> Array3<f32> {
        match self {
            Layer::Conv(c, act) => activate(c.forward(x.view()), *act),
            Layer::Relu => conv::relu(x),
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => conv::max_pool(x.view(), *kernel, *stride, *padding),
            Layer::Residual(b) => b.forward(x.view()),
            Layer::Inverted(b) => b.forward(x.view()),
        }
    }

    fn visit_weights(&self, f: &mut dyn FnMut(&Conv2d)) {
        match self {
            Layer::Conv(c, _) => f(c),
            Layer::Residual(b) => b.convs.iter().chain(&b.downsample).for_each(f),
            Layer::Inverted(b) => b.convs.iter().for_each(|(c, _)| f(c)),
            Layer::Relu | Layer::MaxPool { .. } => {}
        }
    }
}

/// A named tap: the output of layer `index` with `channels` channels.
#[derive(Clone, Debug)]
struct TapPoint {
    name: String,
    index: usize,
    channels: usize,
}

#[derive(Clone, Debug)]
struct Network {
    layers: Vec<Layer>,
    taps: Vec<TapPoint>,
}

const VGG19_CFG: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256, 256],
    &[512, 512, 512, 512],
    &[512, 512, 512, 512],
];

fn build_vgg19(src: &mut dyn ParamSource, depth: usize) -> Result<Network> {
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    let mut cin = 3;
    for (b, block) in VGG19_CFG.iter().enumerate().take(depth) {
        for (i, &cout) in block.iter().enumerate() {
            let idx = layers.len();
            let conv = src.conv(&format!("features.{idx}"), ConvSpec::new(cin, cout, 3, 1), true)?;
            layers.push(Layer::Conv(conv, Act::None));
            layers.push(Layer::Relu);
            let relu_idx = layers.len() - 1;
            taps.push(TapPoint {
                name: format!("relu{}_{}", b + 1, i + 1),
                index: relu_idx,
                channels: cout,
            });
            taps.push(TapPoint {
                name: format!("features.{relu_idx}"),
                index: relu_idx,
                channels: cout,
            });
            cin = cout;
        }
        layers.push(Layer::MaxPool {
            kernel: 2,
            stride: 2,
            padding: 0,
        });
    }
    Ok(Network { layers, taps })
}

fn conv_bn(src: &mut dyn ParamSource, conv: &str, bn: &str, spec: ConvSpec) -> Result<Conv2d> {
    let c = src.conv(conv, spec, false)?;
    let norm = src.batch_norm(bn, spec.cout)?;
    c.fold_batch_norm(&norm)
}

fn build_resnet(src: &mut dyn ParamSource, bottleneck: bool, depth: usize) -> Result<Network> {
    let blocks = [3usize, 4, 6, 3];
    let widths = [64usize, 128, 256, 512];
    let expansion = if bottleneck { 4 } else { 1 };
    let mut layers = vec![
        Layer::Conv(conv_bn(src, "conv1", "bn1", ConvSpec::new(3, 64, 7, 2))?, Act::Relu),
        Layer::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    ];
    let mut taps = vec![TapPoint {
        name: "stem".into(),
        index: 0,
        channels: 64,
    }];
    let mut cin = 64;
    for stage in 0..depth.min(4) {
        let width = widths[stage];
        let cout = width * expansion;
        for j in 0..blocks[stage] {
            let stride = if stage > 0 && j == 0 { 2 } else { 1 };
            let p = format!("layer{}.{j}", stage + 1);
            let convs = if bottleneck {
                vec![
                    conv_bn(src, &format!("{p}.conv1"), &format!("{p}.bn1"), ConvSpec::new(cin, width, 1, 1))?,
                    conv_bn(src, &format!("{p}.conv2"), &format!("{p}.bn2"), ConvSpec::new(width, width, 3, stride))?,
                    conv_bn(src, &format!("{p}.conv3"), &format!("{p}.bn3"), ConvSpec::new(width, cout, 1, 1))?,
                ]
            } else {
                vec![
                    conv_bn(src, &format!("{p}.conv1"), &format!("{p}.bn1"), ConvSpec::new(cin, width, 3, stride))?,
                    conv_bn(src, &format!("{p}.conv2"), &format!("{p}.bn2"), ConvSpec::new(width, width, 3, 1))?,
                ]
            };
            let downsample = if stride != 1 || cin != cout {
                let spec = ConvSpec {
                    padding: 0,
                    ..ConvSpec::new(cin, cout, 1, stride)
                };
                Some(conv_bn(src, &format!("{p}.downsample.0"), &format!("{p}.downsample.1"), spec)?)
            } else {
                None
            };
            layers.push(Layer::Residual(ResidualBlock { convs, downsample }));
            cin = cout;
        }
        taps.push(TapPoint {
            name: format!("layer{}", stage + 1),
            index: layers.len() - 1,
            channels: cout,
        });
    }
    Ok(Network { layers, taps })
}

/// `(expansion t, channels c, repeats n, first stride s)`.
const MOBILENET_V2_CFG: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

fn build_mobilenet_v2(src: &mut dyn ParamSource, last_index: usize) -> Result<Network> {
    let mut layers = vec![Layer::Conv(
        conv_bn(src, "features.0.0", "features.0.1", ConvSpec::new(3, 32, 3, 2))?,
        Act::Relu6,
    )];
    let mut taps = vec![TapPoint {
        name: "features.0".into(),
        index: 0,
        channels: 32,
    }];
    let mut cin = 32;
    'outer: for &(t, c, n, s) in &MOBILENET_V2_CFG {
        for i in 0..n {
            if layers.len() > last_index {
                break 'outer;
            }
            let idx = layers.len();
            let stride = if i == 0 { s } else { 1 };
            let hidden = cin * t;
            let p = format!("features.{idx}.conv");
            let mut convs = Vec::new();
            let mut k = 0;
            if t != 1 {
                convs.push((
                    conv_bn(src, &format!("{p}.0.0"), &format!("{p}.0.1"), ConvSpec::new(cin, hidden, 1, 1))?,
                    Act::Relu6,
                ));
                k = 1;
            }
            convs.push((
                conv_bn(src, &format!("{p}.{k}.0"), &format!("{p}.{k}.1"), ConvSpec::depthwise(hidden, stride))?,
                Act::Relu6,
            ));
            convs.push((
                conv_bn(src, &format!("{p}.{}", k + 1), &format!("{p}.{}", k + 2), ConvSpec::new(hidden, c, 1, 1))?,
                Act::None,
            ));
            layers.push(Layer::Inverted(InvertedResidual {
                convs,
                residual: stride == 1 && cin == c,
            }));
            taps.push(TapPoint {
                name: format!("features.{idx}"),
                index: idx,
                channels: c,
            });
            cin = c;
        }
    }
    Ok(Network { layers, taps })
}

/// A frozen feature extractor plus the ordered list of layers it taps.
#[derive(Clone, Debug)]
pub struct BackboneHandle {
    pub name: String,
    pub tap_points: Vec<String>,
    pub channel_widths: Vec<usize>,
    /// Always true: the extractor exposes no mutable access to its weights.
    pub frozen: bool,
    arch: Arch,
    network: Network,
    tap_layers: Vec<usize>,
}

impl BackboneHandle {
    pub fn load(arch: Arch, weights: &WeightsSource, taps: &[String]) -> Result<Self> {
        let taps: Vec<String> = if taps.is_empty() {
            arch.default_taps()
        } else {
            taps.to_vec()
        };
        if arch == Arch::Pixel {
            if taps != ["pixel"] {
                return Err(config_err!("the pixel backbone has the single tap `pixel`"));
            }
            return Ok(Self {
                name: arch.name().into(),
                tap_points: taps,
                channel_widths: vec![3],
                frozen: true,
                arch,
                network: Network {
                    layers: Vec::new(),
                    taps: Vec::new(),
                },
                tap_layers: Vec::new(),
            });
        }
        let depth = required_depth(arch, &taps)?;
        let network = match weights {
            WeightsSource::Random { seed } => {
                let mut src = RandomSource {
                    rng: rng::rng(rng::derive_seed(*seed, &[rng::stream::BACKBONE])),
                };
                build(arch, &mut src, depth)?
            }
            WeightsSource::File(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
                let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::load(path, e))?;
                let mut src = FileSource { path, tensors };
                build(arch, &mut src, depth)?
            }
        };
        let mut tap_layers = Vec::with_capacity(taps.len());
        let mut channel_widths = Vec::with_capacity(taps.len());
        for tap in &taps {
            let point = network
                .taps
                .iter()
                .find(|t| &t.name == tap)
                .ok_or_else(|| config_err!("backbone {arch} has no tap point `{tap}`"))?;
            if tap_layers.last().is_some_and(|&prev| point.index <= prev) {
                return Err(config_err!("tap points must be ordered shallow to deep"));
            }
            tap_layers.push(point.index);
            channel_widths.push(point.channels);
        }
        Ok(Self {
            name: arch.name().into(),
            tap_points: taps,
            channel_widths,
            frozen: true,
            arch,
            network,
            tap_layers,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn total_channels(&self) -> usize {
        self.channel_widths.iter().sum()
    }

    /// Runs the network up to the deepest tap, returning one map per tap.
    pub fn forward(&self, image: ArrayView3<f32>) -> Vec<Array3<f32>> {
        if self.arch == Arch::Pixel {
            return vec![image.to_owned()];
        }
        let last = *self.tap_layers.last().expect("at least one tap");
        let mut out = Vec::with_capacity(self.tap_layers.len());
        let mut x = image.to_owned();
        let mut next = 0;
        for (i, layer) in self.network.layers.iter().enumerate().take(last + 1) {
            x = layer.forward(x);
            if self.tap_layers[next] == i {
                out.push(x.clone());
                next += 1;
            }
        }
        out
    }

    /// Hash over every weight bit pattern; changes iff any parameter changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for layer in &self.network.layers {
            layer.visit_weights(&mut |c: &Conv2d| c.hash_bits(&mut h));
        }
        h.finish()
    }
}

impl Conv2d {
    fn hash_bits<H: Hasher>(&self, h: &mut H) {
        self.weights_iter().for_each(|v| v.to_bits().hash(h));
    }
}

fn required_depth(arch: Arch, taps: &[String]) -> Result<usize> {
    let mut depth = 0;
    for tap in taps {
        let d = match arch {
            Arch::Vgg19 => {
                if let Some(rest) = tap.strip_prefix("relu") {
                    rest.split('_').next().and_then(|b| b.parse::<usize>().ok())
                } else if let Some(rest) = tap.strip_prefix("features.") {
                    // torchvision indices: each block ends with a pool layer
                    rest.parse::<usize>().ok().map(|i| match i {
                        0..=4 => 1,
                        5..=9 => 2,
                        10..=18 => 3,
                        19..=27 => 4,
                        _ => 5,
                    })
                } else {
                    None
                }
            }
            Arch::ResNet34 | Arch::ResNet50 => match tap.as_str() {
                "stem" => Some(0),
                t => t.strip_prefix("layer").and_then(|s| s.parse().ok()),
            },
            Arch::MobileNetV2 => tap
                .strip_prefix("features.")
                .and_then(|s| s.parse::<usize>().ok())
                .map(|i| i + 1),
            Arch::Pixel => Some(0),
        };
        match d {
            Some(d) if d <= 18 => depth = depth.max(d),
            _ => return Err(config_err!("backbone {arch} has no tap point `{tap}`")),
        }
    }
    Ok(depth)
}

fn build(arch: Arch, src: &mut dyn ParamSource, depth: usize) -> Result<Network> {
    match arch {
        Arch::Vgg19 => build_vgg19(src, depth.clamp(1, 5)),
        Arch::ResNet34 => build_resnet(src, false, depth),
        Arch::ResNet50 => build_resnet(src, true, depth),
        Arch::MobileNetV2 => build_mobilenet_v2(src, depth.saturating_sub(1)),
        Arch::Pixel => unreachable!("pixel backbone has no layers"),
    }
}
