//! Directory datasets, augmentation, class statistics, the synthetic
//! generator, and in-memory batching.

mod augment;
mod loader;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, denormalize, normalize, AugmentConfig, AugmentPolicy, Jitter, IMAGENET_MEAN, IMAGENET_STD};
pub use loader::{Batch, Dataset};
pub use synth::{render, synth_dataset, synth_memory, synth_split, SynthConfig};

/// Class folders, in label order.
pub const CLASSES: [&str; 4] = ["Cataract", "DR", "Glaucoma", "Normal"];
pub const EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub classes: Vec<String>,
    pub samples: Vec<(PathBuf, usize)>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for (_, y) in &self.samples {
            c[*y] += 1;
        }
        c
    }
}

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Lists `root/split/{class}/*.{jpg,jpeg,png}` in lexicographic order.
pub fn scan_dataset(root: impl AsRef<Path>, split: Split) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing split directory {}", dir.display())));
    }
    let mut unknown = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !CLASSES.contains(&name.as_str()) {
                unknown.push(name);
            }
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::Dataset(format!(
            "unknown class folder(s) in {}: {}",
            dir.display(),
            unknown.join(", ")
        )));
    }
    let mut samples = Vec::new();
    for (label, class) in CLASSES.iter().enumerate() {
        let cdir = dir.join(class);
        let mut files: Vec<PathBuf> = if cdir.is_dir() {
            std::fs::read_dir(&cdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && has_image_ext(p))
                .collect()
        } else {
            Vec::new()
        };
        if files.is_empty() {
            log::warn!("{split} split has no images for class {class}");
        }
        files.sort();
        samples.extend(files.into_iter().map(|p| (p, label)));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        classes: CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub split: Split,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Inverse-frequency weights `N/(K·n_c)` rescaled to mean one.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {c} has no samples; weights undefined")));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| n as f64 / (k * c as f64)).collect();
    let mean = raw.iter().sum::<f64>() / k;
    Ok(raw.iter().map(|w| w / mean).collect())
}

pub fn stats_from_counts(split: Split, counts: Vec<usize>) -> Result<ClassStats> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let fractions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let weights = class_weights(&counts)?;
    Ok(ClassStats {
        split,
        counts,
        fractions,
        weights,
    })
}

pub fn class_stats(index: &DatasetIndex) -> Result<ClassStats> {
    stats_from_counts(index.split, index.counts())
}

/// Decodes any supported image to RGB floats in `[0,1]`, `[3,H,W]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Tensor::new(
        vec![3, h, w],
        (0..3 * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                f32::from(raw[p * 3 + c]) / 255.0
            })
            .collect(),
    )
}

/// Writes a `[3,H,W]` tensor in `[0,1]` as an 8-bit PNG.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_png", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            buf[p * 3 + c] = (t.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    image::save_buffer(path.as_ref(), &buf, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_class_fractions() {
        // label order Cataract, DR, Glaucoma, Normal
        let s = stats_from_counts(Split::Train, vec![700, 1496, 878, 1923]).unwrap();
        let pct: Vec<f64> = s.fractions.iter().map(|f| (f * 1000.0).round() / 10.0).collect();
        assert_eq!(pct, vec![14.0, 29.9, 17.6, 38.5]);
        assert!((s.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((s.weights.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(class_weights(&[5, 5, 5, 5]).unwrap(), vec![1.0; 4]);
        let w = class_weights(&[3, 1]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12);
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn extension_filter_is_case_insensitive() {
        assert!(has_image_ext(Path::new("a/b.PNG")));
        assert!(has_image_ext(Path::new("a/b.jpeg")));
        assert!(!has_image_ext(Path::new("a/notes.txt")));
        assert!(!has_image_ext(Path::new("a/png")));
    }
}
