//! Optimization loop, optimizer and loss log.
//!
//! Features are extracted once up front since the backbone never changes.
//! Every step draws fresh decoupling seeds, so the model keeps seeing new
//! splits of the same images.

pub mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::error::{config_err, invalid_input, Error, Result};
use crate::fptd::{unfold, GridShape};
use crate::lpsr::Pfdf;
use crate::model::layers::ParamMut;
use crate::model::{ModelConfig, StMae};
use crate::real::Real;
use crate::residuals::{patch_loss, LossModality, LossReport, DEFAULT_LAMBDA};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: String,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda: f64,
    pub modality: LossModality,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
}

/// How decoupling seeds evolve over training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// A new split for every sample at every step.
    #[default]
    FreshPerStep,
    /// Each training image keeps one split for the whole run.
    Fixed,
}

impl std::str::FromStr for SeedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh-per-step" => Ok(SeedPolicy::FreshPerStep),
            "fixed" => Ok(SeedPolicy::Fixed),
            _ => Err(config_err!("unknown seed policy `{s}` (expected fresh-per-step or fixed)")),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            epochs: 400,
            optimizer: "adamw".into(),
            weight_decay: 0.05,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            modality: LossModality::Both,
            seed_policy: SeedPolicy::FreshPerStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("training.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err(config_err!("training.batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(config_err!("training.epochs must be at least 1"));
        }
        if self.optimizer != "adamw" {
            return Err(config_err!("training.optimizer `{}` is not supported (only adamw)", self.optimizer));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("training.weight_decay must be non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(config_err!("training.lambda must be non-negative"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay on weight matrices only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments in parameter visiting order; empty until
    /// the first update.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, model: &mut StMae<T>) {
        self.step += 1;
        let t = self.step as i32;
        let step_size = T::of(self.lr / (1.0 - self.beta1.powi(t)));
        let bc2_sqrt = T::of((1.0 - self.beta2.powi(t)).sqrt());
        let shrink = T::one() - T::of(self.lr * self.weight_decay);
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_mut(&mut |p: ParamMut<'_, T>| {
            if m_all.len() <= k {
                m_all.push(vec![T::zero(); p.value.len()]);
                v_all.push(vec![T::zero(); p.value.len()]);
            }
            let (m, v) = (&mut m_all[k], &mut v_all[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                if p.decay {
                    p.value[i] *= shrink;
                }
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
            k += 1;
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossReport,
}

/// Decoupling seed of sample `i` at optimizer step `step`.
pub fn sample_seed(base: u64, step: u64, i: usize) -> u64 {
    rng::derive_seed(base, &[stream::DECOUPLE, step, i as u64])
}

/// One update on a batch of unfolded patches (`samples·N` rows). The returned
/// loss is evaluated at the weights before the update.
pub fn training_step<T: Real>(
    model: &mut StMae<T>,
    opt: &mut AdamW<T>,
    patches: &Array2<T>,
    samples: usize,
    seeds: &[u64],
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossReport> {
    if seeds.len() != samples {
        return Err(invalid_input!("{} seeds for {samples} samples", seeds.len()));
    }
    let (out, tape) = model.forward_batch(patches, seeds)?;
    let (report, grad) = patch_loss(out.view(), patches.view(), samples, cfg.lambda, cfg.modality)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step,
            l_int: report.l_int,
            l_ori: report.l_ori,
        });
    }
    model.zero_grad();
    model.backward(&tape, &grad);
    opt.update(model);
    Ok(report)
}

/// Common geometry of a feature set.
pub fn feature_grid(features: &[Pfdf], patch: usize) -> Result<GridShape> {
    let first = features.first().ok_or_else(|| invalid_input!("training set is empty"))?;
    let (h, w, c) = first.dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != (h, w, c)) {
        return Err(invalid_input!(
            "feature map `{}` is {:?}, expected {:?}",
            bad.source,
            bad.dim(),
            (h, w, c)
        ));
    }
    GridShape::new(h, w, c, patch)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: StMae<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
}

fn stack_rows(parts: &[ArrayView2<f32>]) -> Array2<f32> {
    concatenate(Axis(0), parts).expect("equal widths")
}

/// Trains a fresh model on pre-extracted normal features. `observer` sees
/// every step in order.
pub fn train(
    features: &[Pfdf],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    let grid = feature_grid(features, model_cfg.patch)?;
    let mut model = StMae::<f32>::new(model_cfg.clone(), grid, cfg.seed)?;
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let patches: Vec<Array2<f32>> = features.iter().map(|f| unfold(f.data.view(), grid)).collect();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng(rng::derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<_> = chunk.iter().map(|&i| patches[i].view()).collect();
            let batch = stack_rows(&views);
            let seeds: Vec<u64> = match cfg.seed_policy {
                SeedPolicy::FreshPerStep => (0..chunk.len()).map(|i| sample_seed(cfg.seed, step, i)).collect(),
                SeedPolicy::Fixed => chunk.iter().map(|&i| sample_seed(cfg.seed, u64::MAX, i)).collect(),
            };
            let loss = training_step(&mut model, &mut optimizer, &batch, chunk.len(), &seeds, cfg, step)?;
            observer(&StepRecord { step, epoch, loss })?;
            step += 1;
        }
    }
    model.zero_grad();
    Ok(Trained {
        model,
        optimizer,
        step,
    })
}

pub const LOSS_HEADER: &str = "step,epoch,l_int,l_ori,total";

/// Append-only CSV of per-step losses.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            writeln!(out, "{LOSS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{}",
            r.step, r.epoch, r.loss.l_int, r.loss.l_ori, r.loss.total
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
