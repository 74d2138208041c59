//! Class-coloured mask overlays on the source images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Image, Mask};
use crate::error::{PbipError, Result};

/// Overlay colours by class index; classes past the end wrap around.
///
/// | index | colour  | RGB           |
/// |-------|---------|---------------|
/// | 0     | red     | 230, 25, 75   |
/// | 1     | green   | 60, 180, 75   |
/// | 2     | blue    | 0, 130, 200   |
/// | 3     | yellow  | 255, 225, 25  |
/// | 4     | orange  | 245, 130, 48  |
/// | 5     | purple  | 145, 30, 180  |
/// | 6     | cyan    | 70, 240, 240  |
/// | 7     | magenta | 240, 50, 230  |
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub const DEFAULT_ALPHA: f32 = 0.45;

pub fn class_colour(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// Blends the class colour into every pixel with a value below
/// `n_classes`; other pixels keep the image colour.
pub fn overlay(image: &Image, mask: &Mask, n_classes: usize, alpha: f32) -> Result<Image> {
    let (h, w, _) = image.dim();
    if mask.dim() != (h, w) {
        return Err(PbipError::Shape(format!("mask is {:?}, image is {h}×{w}", mask.dim())));
    }
    let mut out = image.clone();
    for ((y, x), &v) in mask.indexed_iter() {
        if (v as usize) < n_classes {
            let col = class_colour(v as usize);
            for c in 0..3 {
                let base = image[[y, x, c]];
                out[[y, x, c]] = (1.0 - alpha) * base + alpha * col[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlaySummary {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PbipError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Writes `<id>.png` overlays for every mask in `masks_dir` whose id has an
/// image in `images_dir`. Missing partners and unreadable pairs produce a
/// warning instead of an error.
pub fn render_overlays(masks_dir: &Path, images_dir: &Path, out_dir: &Path, n_classes: usize, alpha: f32) -> Result<OverlaySummary> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PbipError::Config(format!("overlay alpha must lie in [0, 1], got {alpha}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PbipError::io(out_dir, e))?;
    let mut summary = OverlaySummary::default();
    let masks = pngs(masks_dir)?;
    let images = pngs(images_dir)?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    for mp in &masks {
        let id = stem(mp).unwrap_or_default();
        let ip = images_dir.join(format!("{id}.png"));
        if !ip.exists() {
            let msg = format!("no image for mask '{id}'");
            log::warn!("{msg}");
            summary.warnings.push(msg);
            continue;
        }
        let rendered = data::load_mask(mp)
            .and_then(|m| data::load_image(&ip).map(|i| (i, m)))
            .and_then(|(i, m)| overlay(&i, &m, n_classes, alpha));
        match rendered {
            Ok(img) => {
                let out = out_dir.join(format!("{id}.png"));
                data::save_image(&out, &img)?;
                summary.written.push(out);
            }
            Err(e) => {
                let msg = format!("skipping '{id}': {e}");
                log::warn!("{msg}");
                summary.warnings.push(msg);
            }
        }
    }
    for ip in &images {
        let id = stem(ip).unwrap_or_default();
        if !masks_dir.join(format!("{id}.png")).exists() {
            let msg = format!("no mask for image '{id}'");
            log::warn!("{msg}");
            summary.warnings.push(msg);
        }
    }
    Ok(summary)
}
