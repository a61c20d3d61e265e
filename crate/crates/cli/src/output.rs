//! Run directories and heatmap files.

use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array2;
use stmae::config::RunConfig;
use stmae::{Error, Result};

pub const CHECKPOINT: &str = "checkpoint.safetensors";

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn category(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.path.join(name), contents)?;
        Ok(())
    }

    /// Resolved config plus the seeds and version that produced the run.
    pub fn record(&self, cfg: &RunConfig, command: &str) -> Result<()> {
        self.write("config.toml", &cfg.to_toml())?;
        let run = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seeds": {
                "training": cfg.training.seed,
                "eval": cfg.eval.seed,
                "synth": cfg.synth.seed,
                "few_shot": cfg.data.few_shot_seed,
            },
            "args": std::env::args().skip(1).collect::<Vec<_>>(),
        });
        self.write("run.json", &serde_json::to_string_pretty(&run).map_err(|e| Error::Invariant(e.to_string()))?)
    }
}

/// File stem for an image id; ids may contain path separators.
pub fn stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes `map` as an 8-bit PNG stretched to its own range, with the
/// range in a JSON sidecar so raw values can be recovered.
pub fn write_heatmap(dir: &Path, id: &str, map: &Array2<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (lo, hi) = map.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        image::Luma([(t * 255.0).round() as u8])
    });
    let stem = stem_for(id);
    img.save(dir.join(format!("{stem}.png")))?;
    let meta = serde_json::json!({ "id": id, "min": lo, "max": hi });
    std::fs::write(dir.join(format!("{stem}.json")), meta.to_string())?;
    Ok(())
}
