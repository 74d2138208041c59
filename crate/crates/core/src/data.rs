//! Patch datasets with image-level multi-hot labels.
//!
//! Supported on-disk layouts:
//!
//! * **filename**: `train/<id>-[l1 l2 ... lN].png`, `{val,test}/img/<id>.png`
//!   and `{val,test}/mask/<id>.png`. Val/test labels are the classes present
//!   in the mask.
//! * **sidecar**: `manifest.tsv` with `id<TAB>split<TAB>l1,l2,...,lN` lines;
//!   images live at `train/<id>.png` or `{val,test}/img/<id>.png`.
//! * **class folders**: `<class>/<name>.png`, every image a one-hot train
//!   record.
//!
//! An optional `classes.txt` (one name per line) names the classes.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PbipError, Result};

/// `H × W × 3` colour image with values in `[0, 1]`.
pub type Image = Array3<f32>;

/// `H × W` class-index map; the value `N` marks ignored pixels.
pub type Mask = Array2<u8>;

pub const SIDECAR_FILE: &str = "manifest.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

/// Default per-channel level above which a pixel counts as white.
pub const DEFAULT_WHITE_LEVEL: f32 = 0.86;
/// Default largest white fraction a bank candidate may have.
pub const DEFAULT_WHITE_LIMIT: f32 = 0.70;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = PbipError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PbipError::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct PatchRecord {
    pub id: String,
    pub image: Image,
    pub label: Vec<u8>,
    pub split: Split,
    pub gt_mask: Option<Mask>,
    pub path: PathBuf,
}

impl PatchRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.label.iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<PatchRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn ignore_index(&self) -> u8 {
        self.class_names.len() as u8
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FormatHint {
    #[default]
    Auto,
    Filename,
    Sidecar,
    ClassFolders,
}

impl FromStr for FormatHint {
    type Err = PbipError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(FormatHint::Auto),
            "filename" => Ok(FormatHint::Filename),
            "sidecar" => Ok(FormatHint::Sidecar),
            "class-folders" | "folders" => Ok(FormatHint::ClassFolders),
            other => Err(PbipError::Config(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// True iff exactly one label entry is set.
pub fn is_single_class(record: &PatchRecord) -> bool {
    record.label.iter().filter(|&&l| l != 0).count() == 1
}

/// Fraction of pixels whose every channel is at least `white_level`.
pub fn white_fraction(image: &Image, white_level: f32) -> f32 {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h * w == 0 {
        return 0.0;
    }
    let white = image
        .outer_iter()
        .flat_map(|row| row.outer_iter().map(|px| px.iter().all(|&v| v >= white_level)).collect::<Vec<_>>())
        .filter(|&b| b)
        .count();
    white as f32 / (h * w) as f32
}

/// Parses a label string such as `[1 0 0 1]` or `1,0,0,1`.
pub fn parse_label(text: &str) -> Option<Vec<u8>> {
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let parts: Vec<&str> = inner
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .collect();
    if parts.is_empty() {
        return None;
    }
    parts
        .into_iter()
        .map(|p| match p {
            "0" => Some(0u8),
            "1" => Some(1u8),
            _ => None,
        })
        .collect()
}

/// Formats a label the way training filenames encode it.
pub fn format_label(label: &[u8]) -> String {
    let parts: Vec<String> = label.iter().map(|l| l.to_string()).collect();
    format!("[{}]", parts.join(" "))
}

/// Splits `<id>-[l1 ... lN]` into id and label.
pub fn parse_train_stem(stem: &str) -> Option<(String, Vec<u8>)> {
    let open = stem.rfind("-[")?;
    if !stem.ends_with(']') {
        return None;
    }
    let id = &stem[..open];
    if id.is_empty() {
        return None;
    }
    Some((id.to_string(), parse_label(&stem[open + 1..])?))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| PbipError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| PbipError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = match img {
        image::DynamicImage::ImageLuma8(m) => m,
        _ => {
            return Err(PbipError::Image {
                path: path.to_path_buf(),
                message: "mask must be an 8-bit single-channel image".into(),
            })
        }
    };
    let (w, h) = luma.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), luma.into_raw()).expect("mask buffer"))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let raw: Vec<u8> = image.iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer");
    buf.save(path).map_err(|e| PbipError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().copied().collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("mask buffer");
    buf.save(path).map_err(|e| PbipError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PbipError::io(dir, e))? {
        let path = entry.map_err(|e| PbipError::io(dir, e))?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn read_class_names(root: &Path) -> Result<Option<Vec<String>>> {
    let path = root.join(CLASSES_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| PbipError::io(&path, e))?;
    Ok(Some(
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
    ))
}

fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

fn labels_from_mask(mask: &Mask, n: usize) -> Vec<u8> {
    let mut label = vec![0u8; n];
    for &v in mask.iter() {
        if (v as usize) < n {
            label[v as usize] = 1;
        }
    }
    label
}

struct Pending {
    id: String,
    split: Split,
    image_path: PathBuf,
    mask_path: Option<PathBuf>,
    label: Option<Vec<u8>>,
}

fn finish(pending: Vec<Pending>, n: usize) -> Result<Vec<PatchRecord>> {
    let mut records: Vec<PatchRecord> = pending
        .into_par_iter()
        .map(|p| {
            let image = load_image(&p.image_path)?;
            let gt_mask = p.mask_path.as_deref().map(load_mask).transpose()?;
            if let Some(m) = &gt_mask {
                if m.dim() != (image.shape()[0], image.shape()[1]) {
                    return Err(PbipError::Record {
                        path: p.image_path.clone(),
                        reason: format!("mask is {:?} but image is {}×{}", m.dim(), image.shape()[0], image.shape()[1]),
                    });
                }
            }
            let label = match (p.label, &gt_mask) {
                (Some(l), _) => l,
                (None, Some(m)) => labels_from_mask(m, n),
                (None, None) => {
                    return Err(PbipError::Record {
                        path: p.image_path.clone(),
                        reason: "no label and no mask".into(),
                    })
                }
            };
            if label.len() != n {
                return Err(PbipError::Record {
                    path: p.image_path.clone(),
                    reason: format!("label has {} entries, expected {n}", label.len()),
                });
            }
            if p.split == Split::Train && label.iter().all(|&l| l == 0) {
                return Err(PbipError::Record {
                    path: p.image_path.clone(),
                    reason: "training record has an all-zero label".into(),
                });
            }
            Ok(PatchRecord {
                id: p.id,
                image,
                label,
                split: p.split,
                gt_mask,
                path: p.image_path,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| (&a.id, a.split).cmp(&(&b.id, b.split)));
    Ok(records)
}

fn eval_split_pending(root: &Path, split: Split) -> Result<Vec<Pending>> {
    let img_dir = root.join(split.as_str()).join("img");
    if !img_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mask_dir = root.join(split.as_str()).join("mask");
    Ok(list_pngs(&img_dir)?
        .into_iter()
        .map(|p| {
            let id = stem(&p);
            let mask = mask_dir.join(format!("{id}.png"));
            Pending {
                id,
                split,
                mask_path: mask.exists().then_some(mask),
                image_path: p,
                label: None,
            }
        })
        .collect())
}

fn load_filename_layout(root: &Path) -> Result<DatasetManifest> {
    let mut pending = Vec::new();
    let train_dir = root.join("train");
    let mut n_from_labels = None;
    if train_dir.is_dir() {
        for path in list_pngs(&train_dir)? {
            let (id, label) = parse_train_stem(&stem(&path)).ok_or_else(|| PbipError::Record {
                path: path.clone(),
                reason: "filename does not end in a label such as -[1 0 0 1]".into(),
            })?;
            n_from_labels.get_or_insert(label.len());
            pending.push(Pending {
                id,
                split: Split::Train,
                image_path: path,
                mask_path: None,
                label: Some(label),
            });
        }
    }
    pending.extend(eval_split_pending(root, Split::Val)?);
    pending.extend(eval_split_pending(root, Split::Test)?);
    if pending.is_empty() {
        return Err(PbipError::NoRecords(root.to_path_buf()));
    }
    let class_names = match (read_class_names(root)?, n_from_labels) {
        (Some(names), _) => names,
        (None, Some(n)) => default_class_names(n),
        (None, None) => {
            return Err(PbipError::Config(format!(
                "cannot infer the class count under {}: add {CLASSES_FILE}",
                root.display()
            )))
        }
    };
    let n = class_names.len();
    Ok(DatasetManifest {
        class_names,
        records: finish(pending, n)?,
        root: root.to_path_buf(),
    })
}

fn load_sidecar_layout(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(SIDECAR_FILE);
    let text = fs::read_to_string(&path).map_err(|e| PbipError::io(&path, e))?;
    let mut pending = Vec::new();
    let mut n = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |reason: String| PbipError::Record {
            path: path.clone(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let split: Split = fields[1].parse().map_err(|_| bad(format!("bad split '{}'", fields[1])))?;
        let label = parse_label(fields[2]).ok_or_else(|| bad(format!("bad label '{}'", fields[2])))?;
        n.get_or_insert(label.len());
        let id = fields[0].to_string();
        let (image_path, mask_path) = match split {
            Split::Train => (root.join("train").join(format!("{id}.png")), None),
            s => {
                let mask = root.join(s.as_str()).join("mask").join(format!("{id}.png"));
                (
                    root.join(s.as_str()).join("img").join(format!("{id}.png")),
                    mask.exists().then_some(mask),
                )
            }
        };
        pending.push(Pending {
            id,
            split,
            image_path,
            mask_path,
            label: Some(label),
        });
    }
    if pending.is_empty() {
        return Err(PbipError::NoRecords(root.to_path_buf()));
    }
    let class_names = read_class_names(root)?.unwrap_or_else(|| default_class_names(n.unwrap_or(0)));
    let n = class_names.len();
    Ok(DatasetManifest {
        class_names,
        records: finish(pending, n)?,
        root: root.to_path_buf(),
    })
}

fn load_class_folders(root: &Path) -> Result<DatasetManifest> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| PbipError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let class_names: Vec<String> = dirs.iter().map(|d| d.file_name().unwrap().to_string_lossy().into_owned()).collect();
    let n = class_names.len();
    let mut pending = Vec::new();
    for (ci, dir) in dirs.iter().enumerate() {
        for path in list_pngs(dir)? {
            let mut label = vec![0u8; n];
            label[ci] = 1;
            pending.push(Pending {
                id: format!("{}/{}", class_names[ci], stem(&path)),
                split: Split::Train,
                image_path: path,
                mask_path: None,
                label: Some(label),
            });
        }
    }
    if pending.is_empty() {
        return Err(PbipError::NoRecords(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        class_names,
        records: finish(pending, n)?,
        root: root.to_path_buf(),
    })
}

/// Loads every record under `root`. Records are ordered by id.
pub fn load_manifest(root: &Path, format: FormatHint) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(PbipError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let format = match format {
        FormatHint::Auto if root.join(SIDECAR_FILE).is_file() => FormatHint::Sidecar,
        FormatHint::Auto if ["train", "val", "test"].iter().any(|s| root.join(s).is_dir()) => FormatHint::Filename,
        FormatHint::Auto => FormatHint::ClassFolders,
        f => f,
    };
    match format {
        FormatHint::Filename => load_filename_layout(root),
        FormatHint::Sidecar => load_sidecar_layout(root),
        FormatHint::ClassFolders => load_class_folders(root),
        FormatHint::Auto => unreachable!(),
    }
}

/// Shuffled index batches for one epoch. The order depends only on
/// `(seed, epoch)`, so a resumed run replays the same batches.
pub fn epoch_batches(n_items: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Horizontal and/or vertical flip of an image.
pub fn flip(image: &Image, horizontal: bool, vertical: bool) -> Image {
    let mut out = image.clone();
    if horizontal {
        out.invert_axis(ndarray::Axis(1));
    }
    if vertical {
        out.invert_axis(ndarray::Axis(0));
    }
    out.as_standard_layout().to_owned()
}
