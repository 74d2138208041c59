//! Deterministic synthetic patch datasets with textured classes.
//!
//! Every class has its own base colour and stripe frequency/orientation, and
//! three shade subtypes. Train patches are single-class unless mixed train
//! patches are requested; val/test patches tile two or three classes into
//! Voronoi regions with exact masks.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Image, Mask, CLASSES_FILE};
use crate::error::{PbipError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub patch_size: usize,
    pub per_class: usize,
    /// Train patches per class that are mostly white background.
    pub white_per_class: usize,
    /// Multi-class train patches carrying only image-level labels.
    pub mixed_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub stripe_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            patch_size: 64,
            per_class: 50,
            white_per_class: 1,
            mixed_train: 0,
            n_val: 100,
            n_test: 50,
            noise: 0.03,
            stripe_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(16) {
            return Err(PbipError::Config(format!(
                "patch size must be a positive multiple of 16, got {}",
                self.patch_size
            )));
        }
        if self.n_classes < 2 || self.n_classes > 254 {
            return Err(PbipError::Config("synthetic data needs between 2 and 254 classes".into()));
        }
        if self.per_class == 0 || self.white_per_class >= self.per_class {
            return Err(PbipError::Config("per_class must exceed white_per_class".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Texture {
    rgb: [f64; 3],
    freq: f64,
    angle: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const SHADES: [f64; 3] = [0.78, 1.0, 1.18];

fn texture(spec: &SyntheticSpec, class: usize, shade: usize) -> Texture {
    let base = hsv(class as f64 / spec.n_classes as f64, 0.55, 0.62 * SHADES[shade]);
    Texture {
        rgb: base,
        freq: 0.06 + 0.05 * (class % 4) as f64,
        angle: std::f64::consts::PI * class as f64 / spec.n_classes as f64,
    }
}

fn pixel(t: &Texture, amp: f64, phase: f64, y: usize, x: usize, noise: &[f64; 3]) -> [f32; 3] {
    let u = x as f64 * t.angle.cos() + y as f64 * t.angle.sin();
    let s = amp * (2.0 * std::f64::consts::PI * t.freq * u + phase).sin();
    std::array::from_fn(|c| (t.rgb[c] + s + noise[c]).clamp(0.0, 0.84) as f32)
}

fn noise3(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> [f64; 3] {
    std::array::from_fn(|_| dist.sample(rng))
}

fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn single_class_patch(spec: &SyntheticSpec, class: usize, white: bool, rng: &mut ChaCha8Rng) -> Image {
    let n = spec.patch_size;
    let tex = texture(spec, class, rng.random_range(0..3));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let dist = Normal::new(0.0, spec.noise.max(1e-12)).expect("noise");
    let (cy, cx) = (rng.random_range(0.3..0.7) * n as f64, rng.random_range(0.3..0.7) * n as f64);
    let radius = 0.25 * n as f64;
    let mut img = Image::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let nz = noise3(rng, &dist);
            let inside = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() < radius;
            let v = if white && !inside {
                std::array::from_fn(|c| (0.95 + nz[c] * 0.3).clamp(0.0, 1.0) as f32)
            } else {
                pixel(&tex, spec.stripe_amplitude, phase, y, x, &nz)
            };
            for c in 0..3 {
                img[[y, x, c]] = v[c];
            }
        }
    }
    img
}

fn mixed_patch(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let n = spec.patch_size;
    let dist = Normal::new(0.0, spec.noise.max(1e-12)).expect("noise");
    loop {
        let m = rng.random_range(2..=spec.n_classes.min(3));
        let mut classes: Vec<usize> = (0..spec.n_classes).collect();
        for i in 0..m {
            let j = rng.random_range(i..classes.len());
            classes.swap(i, j);
        }
        classes.truncate(m);
        let sites: Vec<(f64, f64)> = (0..m)
            .map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64)))
            .collect();
        let mask: Mask = Array2::from_shape_fn((n, n), |(y, x)| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y as f64 + 0.5 - sy).powi(2) + (x as f64 + 0.5 - sx).powi(2);
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            classes[best] as u8
        });
        let min_area = n * n / 10;
        if classes
            .iter()
            .any(|&c| mask.iter().filter(|&&v| v as usize == c).count() < min_area)
        {
            continue;
        }
        let textures: Vec<(Texture, f64)> = classes
            .iter()
            .map(|&c| {
                (
                    texture(spec, c, rng.random_range(0..3)),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let mut img = Image::zeros((n, n, 3));
        for y in 0..n {
            for x in 0..n {
                let slot = classes.iter().position(|&c| c == mask[[y, x]] as usize).expect("class");
                let (t, phase) = &textures[slot];
                let v = pixel(t, spec.stripe_amplitude, *phase, y, x, &noise3(rng, &dist));
                for c in 0..3 {
                    img[[y, x, c]] = v[c];
                }
            }
        }
        return (img, mask);
    }
}

/// What [`generate_synthetic`] wrote.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes a filename-layout dataset under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticSummary> {
    spec.validate()?;
    let n = spec.n_classes;
    for dir in ["train", "val/img", "val/mask", "test/img", "test/mask"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| PbipError::io(&d, e))?;
    }
    let names: String = (0..n).map(|c| format!("class{c}\n")).collect();
    let classes_path = root.join(CLASSES_FILE);
    std::fs::write(&classes_path, names).map_err(|e| PbipError::io(&classes_path, e))?;

    let train: Vec<(usize, usize)> = (0..n).flat_map(|c| (0..spec.per_class).map(move |i| (c, i))).collect();
    train.par_iter().try_for_each(|&(c, i)| {
        let mut rng = item_rng(spec.seed, (c * spec.per_class + i) as u64);
        let img = single_class_patch(spec, c, i < spec.white_per_class, &mut rng);
        let mut label = vec![0u8; n];
        label[c] = 1;
        let name = format!("c{c}_{i:04}-{}.png", data::format_label(&label));
        data::save_image(&root.join("train").join(name), &img)
    })?;

    (0..spec.mixed_train).into_par_iter().try_for_each(|i| {
        let mut rng = item_rng(spec.seed, (3u64 << 40) + i as u64);
        let (img, mask) = mixed_patch(spec, &mut rng);
        let mut label = vec![0u8; n];
        for &v in mask.iter() {
            label[v as usize] = 1;
        }
        let name = format!("mix_{i:04}-{}.png", data::format_label(&label));
        data::save_image(&root.join("train").join(name), &img)
    })?;

    for (split, count, offset) in [("val", spec.n_val, 1u64 << 40), ("test", spec.n_test, 2u64 << 40)] {
        (0..count).into_par_iter().try_for_each(|i| {
            let mut rng = item_rng(spec.seed, offset + i as u64);
            let (img, mask): (Array3<f32>, Mask) = mixed_patch(spec, &mut rng);
            let name = format!("{split}_{i:04}.png");
            data::save_image(&root.join(split).join("img").join(&name), &img)?;
            data::save_mask(&root.join(split).join("mask").join(&name), &mask)
        })?;
    }
    Ok(SyntheticSummary {
        train: train.len() + spec.mixed_train,
        val: spec.n_val,
        test: spec.n_test,
    })
}
