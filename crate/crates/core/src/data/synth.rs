//! Procedural fundus-like images in four classes: a retina disc with an
//! optic nerve head and vessels, plus a class-specific finding.
//!
//! * Cataract: a milky haze with blur over the whole disc.
//! * DR: dark hemorrhage spots and a few bright exudates.
//! * Glaucoma: an enlarged optic head with a wide pale cup.
//! * Normal: no finding.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_png, scan_dataset, Dataset, DatasetIndex, Split, CLASSES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Images per class in each split.
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Scales the class-specific finding; 1 is the default strength.
    #[serde(default = "unit")]
    pub signal: f32,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn unit() -> f32 {
    1.0
}

fn default_noise() -> f32 {
    0.03
}

impl SynthConfig {
    pub fn new(size: usize, train: usize, val: usize, test: usize) -> Self {
        Self {
            size,
            train_per_class: train,
            val_per_class: val,
            test_per_class: test,
            signal: 1.0,
            noise: default_noise(),
        }
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn coord(&self, i: usize) -> (f32, f32) {
        let s = self.size as f32;
        let (y, x) = (i / self.size, i % self.size);
        ((y as f32 + 0.5) / s * 2.0 - 1.0, (x as f32 + 0.5) / s * 2.0 - 1.0)
    }

    /// Blends `color` into a soft disc of radius `r` at `(cy, cx)`.
    fn blob(&mut self, cy: f32, cx: f32, r: f32, color: [f32; 3], strength: f32, inside: &dyn Fn(f32, f32) -> bool) {
        let soft = 2.0 / self.size as f32;
        for i in 0..self.px.len() {
            let (y, x) = self.coord(i);
            if !inside(y, x) {
                continue;
            }
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let a = (((r - d) / soft) + 0.5).clamp(0.0, 1.0) * strength;
            if a > 0.0 {
                for c in 0..3 {
                    self.px[i][c] = self.px[i][c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }

    fn blur(&mut self) {
        let n = self.size;
        let src = self.px.clone();
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0f32; 3];
                let mut cnt = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                            let p = src[yy as usize * n + xx as usize];
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                            cnt += 1.0;
                        }
                    }
                }
                self.px[y * n + x] = acc.map(|v| v / cnt);
            }
        }
    }
}

/// One `[3,size,size]` image of class `class` with values in `[0,1]`.
pub fn render(class: usize, size: usize, signal: f32, noise: f32, rng: &mut impl Rng) -> Tensor {
    let mut cv = Canvas {
        size,
        px: vec![[0.0; 3]; size * size],
    };
    let cy = rng.gen_range(-0.08..0.08f32);
    let cx = rng.gen_range(-0.08..0.08f32);
    let radius = rng.gen_range(0.8..0.92f32);
    let base = [
        rng.gen_range(0.62..0.85f32),
        rng.gen_range(0.22..0.38f32),
        rng.gen_range(0.08..0.18f32),
    ];
    let (gy, gx) = (rng.gen_range(-0.15..0.15f32), rng.gen_range(-0.15..0.15f32));
    for i in 0..cv.px.len() {
        let (y, x) = cv.coord(i);
        let d2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (radius * radius);
        if d2 <= 1.0 {
            let shade = (1.0 - 0.4 * d2 + gy * y + gx * x).max(0.0);
            cv.px[i] = base.map(|b| b * shade);
        }
    }
    let in_eye = move |y: f32, x: f32| (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius;

    // optic nerve head and vessels leaving it
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let dist = rng.gen_range(0.35..0.5f32) * radius;
    let (dy, dx) = (cy + dist * angle.sin(), cx + dist * angle.cos());
    let vessel = [base[0] * 0.45, base[1] * 0.35, base[2] * 0.4];
    for _ in 0..rng.gen_range(3..6) {
        let mut a = rng.gen_range(0.0..std::f32::consts::TAU);
        let (mut y, mut x) = (dy, dx);
        let bend = rng.gen_range(-0.25..0.25f32);
        for _ in 0..24 {
            y += 0.06 * a.sin();
            x += 0.06 * a.cos();
            a += bend;
            cv.blob(y, x, 0.035, vessel, 0.6, &in_eye);
        }
    }
    let glaucoma = class == 2;
    let disc_r = if glaucoma { 0.13 + 0.09 * signal } else { 0.13 };
    cv.blob(dy, dx, disc_r, [0.98, 0.78, 0.45], 0.9, &in_eye);
    let cup = if glaucoma { 0.35 + 0.4 * signal.min(1.2) } else { 0.35 };
    cv.blob(dy, dx, disc_r * cup, [1.0, 0.96, 0.85], 0.9, &in_eye);

    match class {
        0 => {
            let haze = rng.gen_range(0.3..0.55f32) * signal;
            let milk = [0.86, 0.82, 0.76];
            for i in 0..cv.px.len() {
                let (y, x) = cv.coord(i);
                if in_eye(y, x) {
                    for c in 0..3 {
                        cv.px[i][c] = cv.px[i][c] * (1.0 - haze) + milk[c] * haze;
                    }
                }
            }
            cv.blur();
        }
        1 => {
            let spot = |rng: &mut dyn rand::RngCore| {
                let a = rng.gen_range(0.0..std::f32::consts::TAU);
                let d = rng.gen_range(0.0..0.85f32) * radius;
                (cy + d * a.sin(), cx + d * a.cos())
            };
            for _ in 0..rng.gen_range(8..16) {
                let (y, x) = spot(rng);
                let r = rng.gen_range(0.05..0.09f32);
                cv.blob(y, x, r, [0.15, 0.02, 0.02], 0.9 * signal.min(1.0), &in_eye);
            }
            for _ in 0..rng.gen_range(3..7) {
                let (y, x) = spot(rng);
                let r = rng.gen_range(0.04..0.07f32);
                cv.blob(y, x, r, [0.98, 0.92, 0.45], 0.9 * signal.min(1.0), &in_eye);
            }
        }
        _ => {}
    }

    let gauss = Normal::new(0.0f32, noise.max(0.0)).expect("non-negative noise");
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    for (i, p) in cv.px.iter().enumerate() {
        for c in 0..3 {
            let e = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
            data[c * n + i] = (p[c] + e).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, size, size], data).expect("sized above")
}

fn split_images(split: Split, cfg: &SynthConfig, seed: u64) -> Result<Vec<(usize, Tensor)>> {
    if cfg.size < 16 {
        return Err(Error::invalid(format!("synthetic images need size ≥ 16, got {}", cfg.size)));
    }
    let per = cfg.per_class(split);
    let name = format!("synth/{split}");
    Ok((0..CLASSES.len() * per)
        .map(|i| {
            let label = i / per;
            let mut r = rng::substream(seed, &name, i as u64);
            (label, render(label, cfg.size, cfg.signal, cfg.noise, &mut r))
        })
        .collect())
}

/// Writes one split of the synthetic dataset and returns its index.
pub fn synth_split(root: impl AsRef<Path>, split: Split, cfg: &SynthConfig, seed: u64) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let per = cfg.per_class(split);
    for class in CLASSES {
        std::fs::create_dir_all(root.join(split.as_str()).join(class))?;
    }
    for (i, (label, img)) in split_images(split, cfg, seed)?.into_iter().enumerate() {
        let path = root.join(split.as_str()).join(CLASSES[label]).join(format!("{:05}.png", i - label * per));
        save_png(&img, path)?;
    }
    scan_dataset(root, split)
}

/// The same split held in memory, quantized to 8 bits exactly as the PNG
/// round trip would leave it.
pub fn synth_memory(split: Split, cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    let (labels, images) = split_images(split, cfg, seed)?
        .into_iter()
        .map(|(l, img)| (l, img.map(|v| (v * 255.0).round() / 255.0)))
        .unzip();
    Dataset::from_memory(images, labels)
}

/// Writes all three splits under `root/{train,val,test}/{class}/`.
pub fn synth_dataset(root: impl AsRef<Path>, cfg: &SynthConfig, seed: u64) -> Result<Vec<DatasetIndex>> {
    Split::ALL
        .iter()
        .map(|&s| synth_split(root.as_ref(), s, cfg, seed))
        .collect()
}
