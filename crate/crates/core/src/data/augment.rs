use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize: usize,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub max_rotation_deg: f32,
    pub jitter: Jitter,
    #[serde(default)]
    pub grayscale_p: f64,
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
    #[serde(default)]
    pub ssl_mode: bool,
}

impl AugmentConfig {
    /// Resize and normalize only.
    pub fn eval(resize: usize) -> Self {
        Self {
            resize,
            hflip_p: 0.0,
            vflip_p: 0.0,
            max_rotation_deg: 0.0,
            jitter: Jitter::default(),
            grayscale_p: 0.0,
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
            ssl_mode: false,
        }
    }

    /// Flips, ±12° rotation and mild color jitter.
    pub fn train(resize: usize) -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            max_rotation_deg: 12.0,
            jitter: Jitter {
                brightness: 0.1,
                contrast: 0.1,
                saturation: 0.1,
                hue: 0.05,
            },
            ..Self::eval(resize)
        }
    }

    /// Random resized crop, strong jitter and occasional grayscale.
    pub fn ssl(resize: usize) -> Self {
        Self {
            jitter: Jitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.0,
            },
            grayscale_p: 0.2,
            ssl_mode: true,
            ..Self::eval(resize)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.hflip_p, self.vflip_p, self.grayscale_p];
        let j = self.jitter;
        if self.resize == 0
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || [j.brightness, j.contrast, j.saturation, j.hue, self.max_rotation_deg]
                .iter()
                .any(|v| *v < 0.0)
            || self.normalize_std.iter().any(|s| *s <= 0.0)
        {
            return Err(Error::invalid(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// A default configuration with optional per-class overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub default: AugmentConfig,
    #[serde(default)]
    pub per_class: BTreeMap<usize, AugmentConfig>,
}

impl AugmentPolicy {
    pub fn uniform(cfg: AugmentConfig) -> Self {
        Self {
            default: cfg,
            per_class: BTreeMap::new(),
        }
    }

    pub fn for_class(&self, class: usize) -> &AugmentConfig {
        self.per_class.get(&class).unwrap_or(&self.default)
    }
}

fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[1], img.shape()[2])
}

fn hflip(img: &Tensor) -> Tensor {
    let w = dims(img).1;
    Tensor::from_fn(img.shape().to_vec(), |i| {
        let (row, x) = (i / w, i % w);
        img.data()[row * w + (w - 1 - x)]
    })
}

fn vflip(img: &Tensor) -> Tensor {
    let (h, w) = dims(img);
    Tensor::from_fn(img.shape().to_vec(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[(c * h + (h - 1 - y)) * w + x]
    })
}

/// Rotation about the image center with bilinear sampling; uncovered pixels are black.
fn rotate(img: &Tensor, degrees: f32) -> Tensor {
    let (h, w) = dims(img);
    let (s, c) = (degrees.to_radians() as f64).sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = img.data();
    let sample = |ch: usize, y: f64, x: f64| -> f32 {
        if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
            return 0.0;
        }
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| f64::from(src[(ch * h + yy) * w + xx]);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    };
    Tensor::from_fn(img.shape().to_vec(), |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse map: rotate the output coordinate back by −θ
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        sample(ch, sy, sx)
    })
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn map_pixels(img: &mut Tensor, f: impl Fn([f32; 3]) -> [f32; 3]) {
    let (h, w) = dims(img);
    let n = h * w;
    let d = img.data_mut();
    for p in 0..n {
        let out = f([d[p], d[n + p], d[2 * n + p]]);
        for c in 0..3 {
            d[c * n + p] = out[c].clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn factor(rng: &mut impl Rng, range: f32) -> Option<f32> {
    (range > 0.0).then(|| rng.gen_range((1.0 - range).max(0.0)..=1.0 + range))
}

/// Brightness, contrast, saturation and hue perturbations, in that order.
fn jitter(img: &mut Tensor, j: &Jitter, rng: &mut impl Rng) {
    if let Some(b) = factor(rng, j.brightness) {
        map_pixels(img, |p| p.map(|v| v * b));
    }
    if let Some(c) = factor(rng, j.contrast) {
        let (h, w) = dims(img);
        let n = h * w;
        let d = img.data();
        let mean = (0..n).map(|p| luma(d[p], d[n + p], d[2 * n + p])).sum::<f32>() / n as f32;
        map_pixels(img, |p| p.map(|v| (v - mean) * c + mean));
    }
    if let Some(s) = factor(rng, j.saturation) {
        map_pixels(img, |p| {
            let g = luma(p[0], p[1], p[2]);
            p.map(|v| (v - g) * s + g)
        });
    }
    if j.hue > 0.0 {
        let shift = rng.gen_range(-j.hue..=j.hue);
        map_pixels(img, |p| {
            let [h, s, v] = rgb_to_hsv(p);
            hsv_to_rgb([h + shift, s, v])
        });
    }
}

fn grayscale(img: &mut Tensor) {
    map_pixels(img, |p| [luma(p[0], p[1], p[2]); 3]);
}

fn random_resized_crop(img: &Tensor, out: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (h, w) = dims(img);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = rng.gen_range(0.3..=1.0) * area;
        let ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            let crop = Tensor::from_fn(vec![3, ch, cw], |i| {
                let (c, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
                img.data()[(c * h + top + y) * w + left + x]
            });
            return bilinear_resize(&crop, out, out);
        }
    }
    bilinear_resize(img, out, out)
}

pub fn normalize(img: &mut Tensor, mean: &[f32; 3], std: &[f32; 3]) {
    let n = img.numel() / 3;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let c = i / n;
        *v = (*v - mean[c]) / std[c];
    }
}

pub fn denormalize(img: &mut Tensor, mean: &[f32; 3], std: &[f32; 3]) {
    let n = img.numel() / 3;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let c = i / n;
        *v = *v * std[c] + mean[c];
    }
}

/// Applies the configured pipeline to a `[3,H,W]` image in `[0,1]`.
///
/// Standard mode: resize, horizontal flip, vertical flip, rotation, jitter,
/// normalize. SSL mode: random resized crop, flips, jitter, grayscale,
/// normalize. Disabled steps draw no randomness.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("augment", s, &[3, 0, 0]));
    }
    cfg.validate()?;
    let mut x = if cfg.ssl_mode {
        random_resized_crop(img, cfg.resize, rng)?
    } else if s[1] == cfg.resize && s[2] == cfg.resize {
        img.clone()
    } else {
        bilinear_resize(img, cfg.resize, cfg.resize)?
    };
    if cfg.hflip_p > 0.0 && rng.gen_bool(cfg.hflip_p) {
        x = hflip(&x);
    }
    if cfg.vflip_p > 0.0 && rng.gen_bool(cfg.vflip_p) {
        x = vflip(&x);
    }
    if !cfg.ssl_mode && cfg.max_rotation_deg > 0.0 {
        let a = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        x = rotate(&x, a);
    }
    jitter(&mut x, &cfg.jitter, rng);
    if cfg.grayscale_p > 0.0 && rng.gen_bool(cfg.grayscale_p) {
        grayscale(&mut x);
    }
    normalize(&mut x, &cfg.normalize_mean, &cfg.normalize_std);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Tensor {
        let mut r = rng::stream(9, "img");
        Tensor::from_fn(vec![3, 12, 10], |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn eval_constant_image() {
        let img = Tensor::full(vec![3, 8, 8], 0.5);
        let out = augment(&img, &AugmentConfig::eval(4), &mut rng::stream(0, "a")).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
        assert!((out.data()[0] - 0.0655).abs() < 1e-4);
        for c in 0..3 {
            let want = (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!(out.data()[c * 16..(c + 1) * 16].iter().all(|v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn disabled_train_equals_eval() {
        let img = sample();
        let mut cfg = AugmentConfig::train(8);
        cfg.hflip_p = 0.0;
        cfg.vflip_p = 0.0;
        cfg.max_rotation_deg = 0.0;
        cfg.jitter = Jitter::default();
        let a = augment(&img, &cfg, &mut rng::stream(1, "a")).unwrap();
        let b = augment(&img, &AugmentConfig::eval(8), &mut rng::stream(2, "a")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_and_shape_stable() {
        let img = sample();
        for cfg in [AugmentConfig::train(16), AugmentConfig::ssl(16)] {
            let a = augment(&img, &cfg, &mut rng::stream(3, "a")).unwrap();
            let b = augment(&img, &cfg, &mut rng::stream(3, "a")).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), &[3, 16, 16]);
        }
    }

    #[test]
    fn normalize_roundtrip() {
        let img = sample();
        let mut x = img.clone();
        normalize(&mut x, &IMAGENET_MEAN, &IMAGENET_STD);
        denormalize(&mut x, &IMAGENET_MEAN, &IMAGENET_STD);
        assert!(x.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn flips_and_rotation() {
        let img = sample();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        assert!(rotate(&img, 0.0).max_abs_diff(&img) < 1e-6);
        let sq = Tensor::full(vec![3, 9, 9], 1.0);
        let r = rotate(&sq, 45.0);
        // corners leave the support and turn black; the center stays
        assert_eq!(r.data()[0], 0.0);
        assert!((r.data()[4 * 9 + 4] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hsv_roundtrip() {
        for p in [[0.2f32, 0.5, 0.9], [0.9, 0.1, 0.1], [0.3, 0.3, 0.3]] {
            let q = hsv_to_rgb(rgb_to_hsv(p));
            assert!(p.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }
}
