//! Checkpoint archive: a safetensors file whose header metadata carries the
//! configuration as JSON. Parameters are stored as `model.<name>`, optimizer
//! moments as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig, Trained};
use crate::error::{config_err, Error, Result};
use crate::fptd::GridShape;
use crate::lpsr::FeatureConfig;
use crate::model::layers::ParamMut;
use crate::model::{ModelConfig, StMae};

pub const FORMAT: &str = "stmae-checkpoint";
pub const VERSION: u32 = 1;
/// How every random draw is derived; recorded so a run can be replayed.
pub const RNG_POLICY: &str = "chacha8, seeds derived with splitmix64 from the base seed and a stream path";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: StMae<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    /// `[height, width, channels, patch]`.
    grid: [usize; 4],
    train: TrainConfig,
    features: FeatureConfig,
    step: u64,
    seed: u64,
    rng_policy: String,
    optimizer_step: u64,
}

/// Rewrites the JSON header with sorted keys. The metadata map has no fixed
/// iteration order, so without this identical checkpoints differ in bytes.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let raw = &bytes[8..8 + len];
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| Error::Invariant(format!("checkpoint header: {e}")))?;
    let sorted = serde_json::to_vec(&value).map_err(|e| Error::Invariant(e.to_string()))?;
    let trimmed = raw.iter().rposition(|&b| b != b' ').map_or(0, |i| i + 1);
    if sorted.len() != trimmed {
        return Err(Error::Invariant("checkpoint header changed length when sorted".into()));
    }
    bytes[8..8 + sorted.len()].copy_from_slice(&sorted);
    Ok(bytes)
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn new(trained: Trained, train: TrainConfig, features: FeatureConfig) -> Self {
        Self {
            model: trained.model,
            optimizer: trained.optimizer,
            step: trained.step,
            train,
            features,
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Errors unless the stored model configuration equals `expected`.
    pub fn ensure_model_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(config_err!(
                "checkpoint model config {:?} does not match the requested {:?}",
                self.model.config,
                expected
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = self.model.grid;
        let header = Header {
            model: self.model.config.clone(),
            grid: [g.height, g.width, g.channels, g.patch],
            train: self.train.clone(),
            features: self.features.clone(),
            step: self.step,
            seed: self.train.seed,
            rng_policy: RNG_POLICY.into(),
            optimizer_step: self.optimizer.step,
        };
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        self.model.visit(&mut |name, shape, values| {
            owned.push((format!("model.{name}"), shape.to_vec(), to_bytes(values)));
        });
        let names: Vec<(String, Vec<usize>)> = owned
            .iter()
            .map(|(n, s, _)| (n["model.".len()..].to_string(), s.clone()))
            .collect();
        for (k, (name, shape)) in names.iter().enumerate().take(self.optimizer.m.len()) {
            owned.push((format!("adam.m.{name}"), shape.clone(), to_bytes(&self.optimizer.m[k])));
            owned.push((format!("adam.v.{name}"), shape.clone(), to_bytes(&self.optimizer.v[k])));
        }
        let views = owned
            .iter()
            .map(|(n, s, d)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), d)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Invariant(format!("tensor view: {e}")))?;
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&header).map_err(|e| Error::Invariant(e.to_string()))?,
            ),
        ]);
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Invariant(format!("serialize: {e}")))?;
        canonical_header(bytes)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(format!(".tmp{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| Error::load(origin, reason);
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| fail(e.to_string()))?;
        let info = meta.metadata().clone().unwrap_or_default();
        if info.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(fail("not a checkpoint archive".into()));
        }
        let version: u32 = info
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("missing version field".into()))?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header: Header = serde_json::from_str(info.get("config").ok_or_else(|| fail("missing config".into()))?)
            .map_err(|e| fail(format!("config record: {e}")))?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| fail(e.to_string()))?;
        let [h, w, c, k] = header.grid;
        let grid = GridShape::new(h, w, c, k)?;
        let mut model = StMae::<f32>::new(header.model, grid, 0)?;

        let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = tensors.tensor(name).map_err(|_| fail(format!("missing tensor `{name}`")))?;
            if t.dtype() != Dtype::F32 || t.shape() != shape {
                return Err(fail(format!("tensor `{name}` has {:?} {:?}, expected F32 {shape:?}", t.dtype(), t.shape())));
            }
            Ok(t.data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let mut failure = None;
        let mut m = Vec::new();
        let mut v = Vec::new();
        let with_moments = header.optimizer_step > 0;
        model.visit_mut(&mut |p: ParamMut<'_, f32>| {
            if failure.is_some() {
                return;
            }
            let loaded = read(&format!("model.{}", p.name), p.shape).and_then(|vals| {
                p.value.copy_from_slice(&vals);
                if with_moments {
                    m.push(read(&format!("adam.m.{}", p.name), p.shape)?);
                    v.push(read(&format!("adam.v.{}", p.name), p.shape)?);
                }
                Ok(())
            });
            if let Err(e) = loaded {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let train = header.train;
        let mut optimizer = AdamW::new(train.lr, train.weight_decay);
        optimizer.step = header.optimizer_step;
        optimizer.m = m;
        optimizer.v = v;
        Ok(Self {
            model,
            optimizer,
            step: header.step,
            train,
            features: header.features,
        })
    }
}
