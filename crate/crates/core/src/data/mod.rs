//! Datasets: MVTec-style folders, class-per-folder sets, video frame folders
//! and the generated benchmark.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid_input, Error, Result};
use crate::rng::{self, stream};

pub use synth::{synth_generate, AnomalyKind, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
    Folder,
    Frames,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageSource {
    /// Decodes to 8-bit RGB; grayscale files are replicated to three channels.
    pub fn load(&self) -> Result<RgbImage> {
        match self {
            ImageSource::File(p) => Ok(image::open(p).map_err(|e| Error::load(p, e))?.to_rgb8()),
            ImageSource::Memory(img) => Ok((**img).clone()),
        }
    }

    pub fn dimensions(&self) -> Result<(u32, u32)> {
        match self {
            ImageSource::File(p) => image::image_dimensions(p).map_err(|e| Error::load(p, e)),
            ImageSource::Memory(img) => Ok(img.dimensions()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    File(PathBuf),
    Memory(Arc<GrayImage>),
}

impl MaskSource {
    pub fn load(&self) -> Result<GrayImage> {
        match self {
            MaskSource::File(p) => Ok(image::open(p).map_err(|e| Error::load(p, e))?.to_luma8()),
            MaskSource::Memory(m) => Ok((**m).clone()),
        }
    }

    pub fn dimensions(&self) -> Result<(u32, u32)> {
        match self {
            MaskSource::File(p) => image::image_dimensions(p).map_err(|e| Error::load(p, e)),
            MaskSource::Memory(m) => Ok(m.dimensions()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub image: ImageSource,
}

/// Position of a test frame inside its clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrameRef {
    pub clip: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    pub id: String,
    pub image: ImageSource,
    /// 0 normal, 1 anomalous.
    pub label: u8,
    /// Pixel ground truth. Absent on a normal item of a masked dataset means
    /// an all-zero mask.
    pub mask: Option<MaskSource>,
    pub frame: Option<FrameRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub layout: Layout,
    pub train_items: Vec<TrainItem>,
    pub test_items: Vec<TestItem>,
    /// True when anomalous test items come with pixel masks.
    pub has_masks: bool,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u8> {
        self.test_items.iter().map(|t| t.label).collect()
    }

    /// Checks mask/image agreement on every masked test item.
    pub fn check_masks(&self) -> Result<()> {
        for t in &self.test_items {
            if let Some(m) = &t.mask {
                let (mi, im) = (m.dimensions()?, t.image.dimensions()?);
                if mi != im {
                    return Err(invalid_input!("mask of `{}` is {mi:?} but the image is {im:?}", t.id));
                }
            }
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Orders digit runs numerically, so `frame2` sorts before `frame10`.
pub fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for ((da, sa), (db, sb)) in ca.iter().zip(cb.iter()) {
        let ord = if *da && *db {
            let (ta, tb) = (sa.trim_start_matches('0'), sb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then(ta.cmp(tb))
        } else {
            sa.cmp(sb)
        };
        if ord.is_ne() {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then(a.cmp(b))
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort_by(|a, b| natural_cmp(&a.file_name().unwrap().to_string_lossy(), &b.file_name().unwrap().to_string_lossy()));
    Ok(files)
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort_by(|a, b| natural_cmp(&a.to_string_lossy(), &b.to_string_lossy()));
    Ok(dirs)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(config_err!("dataset directory `{}` does not exist", p.display()))
    }
}

/// Categories under an MVTec-style root: subfolders holding `train/good`.
pub fn list_mvtec_categories(root: &Path) -> Result<Vec<String>> {
    require_dir(root)?;
    Ok(list_dirs(root)?
        .into_iter()
        .filter(|d| d.join("train").join("good").is_dir())
        .map(|d| dir_name(&d))
        .collect())
}

/// `<root>/<category>/{train/good, test/<defect>, ground_truth/<defect>}`.
/// Masks are matched by stem with an optional `_mask` suffix.
pub fn load_mvtec_layout(root: &Path, category: &str) -> Result<Dataset> {
    let base = root.join(category);
    require_dir(&base)?;
    let train_dir = base.join("train").join("good");
    require_dir(&train_dir)?;
    let train_items = list_images(&train_dir)?
        .into_iter()
        .map(|p| TrainItem {
            id: format!("train/good/{}", file_stem(&p)),
            image: ImageSource::File(p),
        })
        .collect();
    let mut test_items = Vec::new();
    let test_dir = base.join("test");
    if test_dir.is_dir() {
        for defect_dir in list_dirs(&test_dir)? {
            let defect = dir_name(&defect_dir);
            let good = defect == "good";
            let masks = if good {
                HashMap::new()
            } else {
                let gt = base.join("ground_truth").join(&defect);
                if !gt.is_dir() {
                    return Err(invalid_input!(
                        "defect folder `test/{defect}` has no ground truth at `{}`",
                        gt.display()
                    ));
                }
                list_images(&gt)?
                    .into_iter()
                    .map(|p| {
                        let stem = file_stem(&p);
                        (stem.strip_suffix("_mask").unwrap_or(&stem).to_string(), p)
                    })
                    .collect()
            };
            for img in list_images(&defect_dir)? {
                let stem = file_stem(&img);
                let mask = if good {
                    None
                } else {
                    let m = masks
                        .get(&stem)
                        .ok_or_else(|| invalid_input!("no ground-truth mask for `test/{defect}/{stem}`"))?;
                    Some(MaskSource::File(m.clone()))
                };
                test_items.push(TestItem {
                    id: format!("test/{defect}/{stem}"),
                    image: ImageSource::File(img),
                    label: u8::from(!good),
                    mask,
                    frame: None,
                });
            }
        }
    }
    if test_items.is_empty() {
        log::warn!("category `{category}` has no test images");
    }
    let ds = Dataset {
        category: category.into(),
        layout: Layout::Mvtec,
        train_items,
        test_items,
        has_masks: true,
    };
    ds.check_masks()?;
    Ok(ds)
}

/// Share of the normal class kept for training when the root has no
/// explicit `train`/`test` split.
pub const FOLDER_TRAIN_FRACTION: f64 = 0.8;

/// Class-per-subfolder dataset. With `<root>/train/<class>` and
/// `<root>/test/<class>` the split is taken as given; otherwise the normal
/// class is split by sorted filename.
pub fn load_folder_dataset(root: &Path, normal_class: &str) -> Result<Dataset> {
    require_dir(root)?;
    let split = root.join("train").is_dir() && root.join("test").is_dir();
    let (train_root, test_root) = if split {
        (root.join("train"), root.join("test"))
    } else {
        (root.to_path_buf(), root.to_path_buf())
    };
    let classes: Vec<String> = list_dirs(&test_root)?.iter().map(|d| dir_name(d)).collect();
    if !classes.iter().any(|c| c == normal_class) {
        return Err(config_err!(
            "normal class `{normal_class}` not found among {classes:?}"
        ));
    }
    let normal_train = list_images(&train_root.join(normal_class))?;
    let (train_files, normal_test) = if split {
        (normal_train, list_images(&test_root.join(normal_class))?)
    } else {
        let cut = ((normal_train.len() as f64) * FOLDER_TRAIN_FRACTION).round() as usize;
        let (a, b) = normal_train.split_at(cut.min(normal_train.len()));
        (a.to_vec(), b.to_vec())
    };
    let train_items = train_files
        .into_iter()
        .map(|p| TrainItem {
            id: format!("{normal_class}/{}", file_stem(&p)),
            image: ImageSource::File(p),
        })
        .collect();
    let mut test_items = Vec::new();
    for class in &classes {
        let files = if class == normal_class {
            normal_test.clone()
        } else {
            list_images(&test_root.join(class))?
        };
        for p in files {
            test_items.push(TestItem {
                id: format!("{class}/{}", file_stem(&p)),
                image: ImageSource::File(p),
                label: u8::from(class != normal_class),
                mask: None,
                frame: None,
            });
        }
    }
    Ok(Dataset {
        category: normal_class.into(),
        layout: Layout::Folder,
        train_items,
        test_items,
        has_masks: false,
    })
}

pub const FRAME_LABELS: &str = "labels.csv";

fn frame_index(p: &Path) -> Option<usize> {
    let stem = file_stem(p);
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

/// `<root>/train/<clip>/*` (all normal), `<root>/test/<clip>/*` with labels
/// in `<root>/labels.csv` as `clip,frame_index,label`.
pub fn load_frames_dataset(root: &Path) -> Result<Dataset> {
    require_dir(root)?;
    let label_path = root.join(FRAME_LABELS);
    let text = fs::read_to_string(&label_path).map_err(|e| Error::load(&label_path, e))?;
    let mut labels: BTreeMap<(String, usize), u8> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("clip")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [clip, idx, label] => idx
                .parse::<usize>()
                .ok()
                .zip(label.parse::<u8>().ok().filter(|l| *l <= 1))
                .map(|(i, l)| ((clip.to_string(), i), l)),
            _ => None,
        };
        let (key, label) = parsed.ok_or_else(|| Error::load(&label_path, format!("line {}: `{line}`", n + 1)))?;
        labels.insert(key, label);
    }
    let clip_frames = |split: &str| -> Result<Vec<(String, PathBuf)>> {
        let dir = root.join(split);
        require_dir(&dir)?;
        let mut out = Vec::new();
        for clip in list_dirs(&dir)? {
            let name = dir_name(&clip);
            out.extend(list_images(&clip)?.into_iter().map(|p| (name.clone(), p)));
        }
        Ok(out)
    };
    let train_items = clip_frames("train")?
        .into_iter()
        .map(|(clip, p)| TrainItem {
            id: format!("train/{clip}/{}", file_stem(&p)),
            image: ImageSource::File(p),
        })
        .collect();
    let mut test_items = Vec::new();
    for (clip, p) in clip_frames("test")? {
        let index = frame_index(&p).ok_or_else(|| invalid_input!("frame `{}` has no numeric index", p.display()))?;
        let label = *labels
            .get(&(clip.clone(), index))
            .ok_or_else(|| invalid_input!("no label for clip `{clip}` frame {index}"))?;
        test_items.push(TestItem {
            id: format!("test/{clip}/{}", file_stem(&p)),
            image: ImageSource::File(p),
            label,
            mask: None,
            frame: Some(FrameRef { clip, index }),
        });
    }
    Ok(Dataset {
        category: dir_name(root),
        layout: Layout::Frames,
        train_items,
        test_items,
        has_masks: false,
    })
}

/// `k` training images drawn uniformly without replacement, kept in their
/// original order. The test split is untouched.
pub fn few_shot_subset(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > ds.train_items.len() {
        return Err(config_err!(
            "few-shot size {k} must be between 1 and the {} training images",
            ds.train_items.len()
        ));
    }
    let mut idx: Vec<usize> = (0..ds.train_items.len()).collect();
    idx.shuffle(&mut rng::rng(rng::derive_seed(seed, &[stream::FEW_SHOT])));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(Dataset {
        train_items: chosen.into_iter().map(|i| ds.train_items[i].clone()).collect(),
        ..ds.clone()
    })
}

/// Writes a dataset to disk in the MVTec layout, masks as `<stem>_mask.png`.
pub fn write_mvtec_layout(ds: &Dataset, root: &Path) -> Result<()> {
    let base = root.join(&ds.category);
    let save = |dir: &Path, name: &str, img: &RgbImage| -> Result<()> {
        fs::create_dir_all(dir)?;
        img.save(dir.join(format!("{name}.png")))?;
        Ok(())
    };
    for (i, item) in ds.train_items.iter().enumerate() {
        save(&base.join("train").join("good"), &format!("{i:04}"), &item.image.load()?)?;
    }
    let mut counters: HashMap<String, usize> = HashMap::new();
    for item in &ds.test_items {
        let defect = if item.label == 0 {
            "good".to_string()
        } else {
            item.id.split('/').nth(1).unwrap_or("anomaly").to_string()
        };
        let n = counters.entry(defect.clone()).or_default();
        let stem = format!("{n:04}");
        *n += 1;
        save(&base.join("test").join(&defect), &stem, &item.image.load()?)?;
        if item.label == 1 {
            let dir = base.join("ground_truth").join(&defect);
            fs::create_dir_all(&dir)?;
            let mask = match &item.mask {
                Some(m) => m.load()?,
                None => {
                    let (w, h) = item.image.dimensions()?;
                    GrayImage::new(w, h)
                }
            };
            mask.save(dir.join(format!("{stem}_mask.png")))?;
        }
    }
    Ok(())
}
