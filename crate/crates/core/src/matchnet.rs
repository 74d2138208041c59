//! Foreground/background separation from aggregated pseudo-masks and the
//! contrastive losses that pull region features toward prototypes.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, SparseMap, Tape, Var};
use crate::data::Image;
use crate::encoders::{BoundParams, ParamStore, PrototypeEncoder, PrototypeProjector};
use crate::error::{PbipError, Result};
use crate::resample;
use crate::simnet::COSINE_EPS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// `τ[n] = δ · max_p M'(p, n)`.
    #[default]
    PerClass,
    /// One threshold from the maximum over every class.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskWeighting {
    /// `M'` clamped to `[0, 1]`.
    #[default]
    Clamp,
    /// `M'` rescaled per class by its own range.
    Minmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimAggregation {
    /// Sums for the foreground term, means for the background term.
    #[default]
    AsWritten,
    /// Means for both terms.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub delta: f64,
    pub threshold_scope: ThresholdScope,
    pub weighting: MaskWeighting,
    /// When false the soft weights are used without binarisation.
    pub adaptive_threshold: bool,
    pub temp: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub aggregation: SimAggregation,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            delta: 0.15,
            threshold_scope: ThresholdScope::PerClass,
            weighting: MaskWeighting::Clamp,
            adaptive_threshold: true,
            temp: 1.0,
            theta1: 1.0,
            theta2: 0.5,
            aggregation: SimAggregation::AsWritten,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(PbipError::Config(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if !(self.temp > 0.0) {
            return Err(PbipError::Config(format!("temperature must be positive, got {}", self.temp)));
        }
        if self.theta1 < 0.0 || self.theta2 < 0.0 {
            return Err(PbipError::Config("theta weights must be non-negative".into()));
        }
        Ok(())
    }

    fn reductions(&self) -> (Reduce, Reduce) {
        match self.aggregation {
            SimAggregation::AsWritten => (Reduce::Sum, Reduce::Mean),
            SimAggregation::Mean => (Reduce::Mean, Reduce::Mean),
        }
    }
}

/// Bilinear maps shared across calls, keyed by source and target size.
fn cached_bilinear(src: (usize, usize), dst: (usize, usize)) -> Arc<SparseMap> {
    static CACHE: Mutex<Option<HashMap<(usize, usize, usize, usize), Arc<SparseMap>>>> = Mutex::new(None);
    let key = (src.0, src.1, dst.0, dst.1);
    let mut guard = CACHE.lock().expect("bilinear cache");
    guard
        .get_or_insert_with(HashMap::new)
        .entry(key)
        .or_insert_with(|| Arc::new(resample::bilinear(src.0, src.1, dst.0, dst.1)))
        .clone()
}

/// `Σ_i Up(M_i)` on a tape. Each level is `(var, h_i, w_i)` with the var
/// shaped `(h_i·w_i) × N`; the result is `(H·W) × N`.
pub fn aggregate_var(tape: &mut Tape, levels: &[(Var, usize, usize)], height: usize, width: usize) -> Var {
    let ups: Vec<Var> = levels
        .iter()
        .map(|&(v, h, w)| {
            if (h, w) == (height, width) {
                v
            } else {
                tape.linear_map(v, cached_bilinear((h, w), (height, width)))
            }
        })
        .collect();
    tape.add_all(&ups)
}

/// Upsamples every level to `height × width` and sums them.
pub fn aggregate_masks(levels: &[Array3<f64>], height: usize, width: usize) -> Result<Array3<f64>> {
    let n = levels
        .first()
        .map(|l| l.dim().2)
        .ok_or_else(|| PbipError::Shape("no mask levels to aggregate".into()))?;
    let mut out = Array3::zeros((height, width, n));
    for level in levels {
        let (h, w, c) = level.dim();
        if c != n {
            return Err(PbipError::Shape(format!("mask levels disagree on class count: {c} vs {n}")));
        }
        let flat: Vec<f64> = level.iter().copied().collect();
        let up = cached_bilinear((h, w), (height, width)).apply(&flat, n);
        for (o, v) in out.iter_mut().zip(up) {
            *o += v;
        }
    }
    Ok(out)
}

fn thresholds_from_columns(m: &[f64], n: usize, delta: f64, scope: ThresholdScope) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(PbipError::Config(format!("delta must lie in [0, 1], got {delta}")));
    }
    let mut max = vec![f64::NEG_INFINITY; n];
    for row in m.chunks_exact(n) {
        for (mx, &v) in max.iter_mut().zip(row) {
            *mx = mx.max(v);
        }
    }
    if scope == ThresholdScope::Global {
        let g = max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max.iter_mut().for_each(|v| *v = g);
    }
    Ok(max.into_iter().map(|v| delta * v).collect())
}

/// `τ = δ · max M'`, per class or over all classes.
pub fn adaptive_threshold(m: &Array3<f64>, delta: f64, scope: ThresholdScope) -> Result<Vec<f64>> {
    let n = m.dim().2;
    thresholds_from_columns(m.as_standard_layout().as_slice().expect("standard layout"), n, delta, scope)
}

/// Per-class foreground and background images for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationResult {
    pub tau: Vec<f64>,
    /// `H × W × N`, one where `M' ≥ τ`.
    pub b: Array3<u8>,
    /// `N × H × W × 3`.
    pub x_fg: Array4<f64>,
    pub x_bg: Array4<f64>,
    pub present: Vec<bool>,
}

fn soft_weights(column: &[f64], weighting: MaskWeighting) -> Vec<f64> {
    match weighting {
        MaskWeighting::Clamp => column.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        MaskWeighting::Minmax => {
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < COSINE_EPS {
                column.iter().map(|v| v.clamp(0.0, 1.0)).collect()
            } else {
                column.iter().map(|v| (v - lo) / (hi - lo)).collect()
            }
        }
    }
}

/// Thresholds `M'` and multiplies the image by the foreground weight
/// `b·w` and the background weight `(1 − b)·(1 − w)` of every class.
pub fn separate(m: &Array3<f64>, tau: &[f64], image: &Image, label: &[u8], cfg: &MatchConfig) -> Result<SeparationResult> {
    let (h, w, n) = m.dim();
    let (ih, iw, ic) = image.dim();
    if (ih, iw) != (h, w) || ic != 3 || tau.len() != n || label.len() != n {
        return Err(PbipError::Shape(format!(
            "separate: mask {h}×{w}×{n}, image {ih}×{iw}×{ic}, {} thresholds, {} labels",
            tau.len(),
            label.len()
        )));
    }
    let mut b = Array3::zeros((h, w, n));
    let mut x_fg = Array4::zeros((n, h, w, 3));
    let mut x_bg = Array4::zeros((n, h, w, 3));
    for c in 0..n {
        let column: Vec<f64> = m.slice(ndarray::s![.., .., c]).iter().copied().collect();
        let soft = soft_weights(&column, cfg.weighting);
        for (p, (&v, &s)) in column.iter().zip(&soft).enumerate() {
            let (y, x) = (p / w, p % w);
            let (wf, wb) = if cfg.adaptive_threshold {
                let fg = v >= tau[c];
                b[[y, x, c]] = u8::from(fg);
                if fg {
                    (s, 0.0)
                } else {
                    (0.0, 1.0 - s)
                }
            } else {
                b[[y, x, c]] = u8::from(v >= tau[c]);
                (s, 1.0 - s)
            };
            for ch in 0..3 {
                let px = image[[y, x, ch]] as f64;
                x_fg[[c, y, x, ch]] = wf * px;
                x_bg[[c, y, x, ch]] = wb * px;
            }
        }
    }
    Ok(SeparationResult {
        tau: tau.to_vec(),
        b,
        x_fg,
        x_bg,
        present: label.iter().map(|&v| v != 0).collect(),
    })
}

/// Differentiable region images for every present class.
pub struct RegionVars {
    pub classes: Vec<usize>,
    /// One `(H·W) × 3` node per present class.
    pub fg: Vec<Var>,
    pub bg: Vec<Var>,
    pub tau: Vec<f64>,
}

/// Builds foreground and background images on the tape from an aggregated
/// `(H·W) × N` mask node. Gradients reach the mask through the soft weights;
/// the binary mask is treated as a constant.
pub fn region_images_var(tape: &mut Tape, m: Var, image: &Image, label: &[u8], cfg: &MatchConfig) -> Result<RegionVars> {
    let (h, w, _) = image.dim();
    let n = tape.shape(m)[1];
    if tape.shape(m)[0] != h * w || label.len() != n {
        return Err(PbipError::Shape("region_images_var: mask does not match image or label".into()));
    }
    let tau = thresholds_from_columns(tape.value(m), n, cfg.delta, cfg.threshold_scope)?;
    let pixels: Arc<Vec<f64>> = Arc::new(image.iter().map(|&v| v as f64).collect());
    let mut out = RegionVars {
        classes: Vec::new(),
        fg: Vec::new(),
        bg: Vec::new(),
        tau: tau.clone(),
    };
    for c in (0..n).filter(|&c| label[c] != 0) {
        let col = tape.column(m, c);
        let soft = match cfg.weighting {
            MaskWeighting::Clamp => tape.clamp01(col),
            MaskWeighting::Minmax => tape.minmax_scale(col, COSINE_EPS),
        };
        let inv = tape.affine(soft, -1.0, 1.0);
        let (wf, wb) = if cfg.adaptive_threshold {
            let b: Vec<f64> = tape.value(col).iter().map(|&v| if v >= tau[c] { 1.0 } else { 0.0 }).collect();
            let nb = b.iter().map(|v| 1.0 - v).collect();
            (tape.mul_const(soft, b), tape.mul_const(inv, nb))
        } else {
            (soft, inv)
        };
        out.classes.push(c);
        out.fg.push(tape.weight_rows_const(wf, pixels.clone(), 3));
        out.bg.push(tape.weight_rows_const(wb, pixels.clone(), 3));
    }
    if out.classes.is_empty() {
        return Err(PbipError::EmptyLabel);
    }
    Ok(out)
}

/// Encoded and projected region features, one `N × C_i` array per level.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchFeatures {
    pub fg: [Array2<f64>; 3],
    pub bg: [Array2<f64>; 3],
    /// Rows of absent classes are zero and flagged false.
    pub valid: Vec<bool>,
}

/// Encodes every present class's region images with the frozen encoder and
/// maps them through the prototype projector.
pub fn encode_regions(
    sep: &SeparationResult,
    encoder: &dyn PrototypeEncoder,
    projector: &PrototypeProjector,
    params: &ParamStore,
) -> Result<MatchFeatures> {
    let (n, h, w, _) = sep.x_fg.dim();
    let mut fg: [Array2<f64>; 3] = std::array::from_fn(|i| Array2::zeros((n, projector.channel_dims[i])));
    let mut bg = fg.clone();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    for c in (0..n).filter(|&c| sep.present[c]) {
        for (images, out) in [(&sep.x_fg, &mut fg), (&sep.x_bg, &mut bg)] {
            let pixels: Vec<f64> = images.slice(ndarray::s![c, .., .., ..]).iter().copied().collect();
            let x = tape.leaf(pixels, &[h * w, 3]);
            let e = encoder.encode_var(&mut tape, x, h, w)?;
            let ys = projector.project_var(&mut tape, &bound, e)?;
            for (level, y) in ys.iter().enumerate() {
                out[level].row_mut(c).assign(&ndarray::ArrayView1::from(tape.value(*y)));
            }
        }
    }
    Ok(MatchFeatures {
        fg,
        bg,
        valid: sep.present.clone(),
    })
}

/// Contrastive loss of region feature rows against class-major prototype
/// rows `(N·K) × C`, using cosine similarity.
pub fn region_contrastive_var(
    tape: &mut Tape,
    features: Var,
    classes: &[usize],
    prototypes: Var,
    k: usize,
    temp: f64,
    reduce: Reduce,
) -> Result<Var> {
    let rows = tape.shape(prototypes)[0];
    if k == 0 || !rows.is_multiple_of(k) || rows / k < 2 {
        return Err(PbipError::Config(format!(
            "contrastive loss needs at least two classes of K = {k} prototypes, got {rows} rows"
        )));
    }
    if classes.is_empty() {
        return Err(PbipError::EmptyLabel);
    }
    let f = tape.l2_normalize_rows(features, COSINE_EPS);
    let p = tape.l2_normalize_rows(prototypes, COSINE_EPS);
    let s = tape.matmul_bt(f, p);
    Ok(tape.contrastive_rows(s, classes, k, temp, reduce, reduce))
}

fn level_loss(features: &Array2<f64>, prototypes: &Array3<f64>, present: &[bool], temp: f64, reduce: Reduce) -> Result<f64> {
    let (n, k, c) = prototypes.dim();
    if features.dim() != (n, c) || present.len() != n {
        return Err(PbipError::Shape(format!(
            "features {:?} do not match prototypes {n}×{k}×{c}",
            features.dim()
        )));
    }
    let classes: Vec<usize> = (0..n).filter(|&j| present[j]).collect();
    if classes.is_empty() {
        return Err(PbipError::EmptyLabel);
    }
    let mut tape = Tape::new();
    let rows: Vec<f64> = classes.iter().flat_map(|&j| features.row(j).to_vec()).collect();
    let f = tape.leaf(rows, &[classes.len(), c]);
    let p = tape.leaf(prototypes.iter().copied().collect(), &[n * k, c]);
    let l = region_contrastive_var(&mut tape, f, &classes, p, k, temp, reduce)?;
    Ok(tape.scalar(l))
}

/// Foreground term for one level, averaged over present classes.
pub fn fg_similarity_loss(f_fg: &Array2<f64>, p: &Array3<f64>, present: &[bool], temp: f64) -> Result<f64> {
    level_loss(f_fg, p, present, temp, Reduce::Sum)
}

/// Background term for one level, averaged over present classes.
pub fn bg_similarity_loss(f_bg: &Array2<f64>, p: &Array3<f64>, present: &[bool], temp: f64) -> Result<f64> {
    level_loss(f_bg, p, present, temp, Reduce::Mean)
}

/// Level-averaged foreground and background terms under `cfg`.
pub fn match_losses(features: &MatchFeatures, prototypes: &[Array3<f64>; 3], cfg: &MatchConfig) -> Result<(f64, f64)> {
    let (rf, rb) = cfg.reductions();
    let mut fgs = 0.0;
    let mut bgs = 0.0;
    for level in 0..3 {
        fgs += level_loss(&features.fg[level], &prototypes[level], &features.valid, cfg.temp, rf)?;
        bgs += level_loss(&features.bg[level], &prototypes[level], &features.valid, cfg.temp, rb)?;
    }
    Ok((fgs / 3.0, bgs / 3.0))
}

/// `θ1 · fgs + θ2 · bgs`.
pub fn similarity_loss(fgs: f64, bgs: f64, theta1: f64, theta2: f64) -> f64 {
    theta1 * fgs + theta2 * bgs
}

#[allow(clippy::too_many_arguments)]
/// Foreground and background loss nodes for one image, averaged over the
/// three levels. `prototypes[i]` is the `(N·K) × C_i` projected bank.
pub fn similarity_terms_var(
    tape: &mut Tape,
    regions: &RegionVars,
    encoder: &dyn PrototypeEncoder,
    projector: &PrototypeProjector,
    params: &BoundParams,
    prototypes: &[Var; 3],
    k: usize,
    height: usize,
    width: usize,
    cfg: &MatchConfig,
) -> Result<(Var, Var)> {
    let (rf, rb) = cfg.reductions();
    let encode = |tape: &mut Tape, images: &[Var]| -> Result<[Var; 3]> {
        let codes = images
            .iter()
            .map(|&x| encoder.encode_var(tape, x, height, width))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.stack_rows(&codes);
        projector.project_var(tape, params, stacked)
    };
    let f_fg = encode(tape, &regions.fg)?;
    let f_bg = encode(tape, &regions.bg)?;
    let mut fg_terms = Vec::with_capacity(3);
    let mut bg_terms = Vec::with_capacity(3);
    for level in 0..3 {
        fg_terms.push(region_contrastive_var(
            tape,
            f_fg[level],
            &regions.classes,
            prototypes[level],
            k,
            cfg.temp,
            rf,
        )?);
        bg_terms.push(region_contrastive_var(
            tape,
            f_bg[level],
            &regions.classes,
            prototypes[level],
            k,
            cfg.temp,
            rb,
        )?);
    }
    let fg = tape.add_all(&fg_terms);
    let bg = tape.add_all(&bg_terms);
    Ok((tape.affine(fg, 1.0 / 3.0, 0.0), tape.affine(bg, 1.0 / 3.0, 0.0)))
}

/// Writes `X_FG` and `X_BG` of every present class as PNGs.
pub fn dump_regions(sep: &SeparationResult, dir: &Path, id: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PbipError::io(dir, e))?;
    let (n, h, w, _) = sep.x_fg.dim();
    for c in (0..n).filter(|&c| sep.present[c]) {
        for (tag, images) in [("fg", &sep.x_fg), ("bg", &sep.x_bg)] {
            let img = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| images[[c, y, x, ch]] as f32);
            crate::data::save_image(&dir.join(format!("{id}_class{c}_{tag}.png")), &img)?;
        }
    }
    Ok(())
}
