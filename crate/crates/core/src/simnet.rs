//! Prototype-similarity pseudo-masks and the image-level classification loss.
//!
//! At every backbone level each pixel feature is compared with the `K`
//! projected prototypes of every class; the mean cosine is that pixel's
//! confidence for the class. Global average pooling of the confidence maps
//! gives image-level scores that are trained against the multi-hot label.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{BoundParams, FeatureMap, ParamStore};
use crate::error::{PbipError, Result};

/// Norm floor used inside every cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-level confidence maps plus optional aggregated and binarised maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMaskStack {
    /// `M_i` with shape `(H/2^{i+1}, W/2^{i+1}, N)`.
    pub levels: Vec<Array3<f64>>,
    /// Sum of the upsampled levels, `(H, W, N)`.
    pub aggregated: Option<Array3<f64>>,
    pub binary: Option<Array3<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelPredictions {
    /// `3 × N` pooled scores before the logistic.
    pub yhat: Array2<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLossKind {
    /// Per-class binary cross-entropy on `σ(s·ŷ)`.
    #[default]
    Bce,
    /// Softmax cross-entropy against the label normalised to sum one.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsLossConfig {
    pub logit_scale: f64,
    pub level_weights: [f64; 3],
    pub kind: ClsLossKind,
}

impl Default for ClsLossConfig {
    fn default() -> Self {
        Self {
            logit_scale: 10.0,
            level_weights: [1.0; 3],
            kind: ClsLossKind::Bce,
        }
    }
}

/// Mean cosine similarity between every pixel of `feat` and the `K`
/// prototypes of each class. `prototypes` is `(N·K) × C`, class-major.
/// Returns an `(h·w) × N` node.
pub fn similarity_var(tape: &mut Tape, feat: &FeatureMap, prototypes: Var, k: usize) -> Result<Var> {
    let pshape = tape.shape(prototypes).to_vec();
    if pshape.len() != 2 || pshape[1] != feat.channels {
        return Err(PbipError::Shape(format!(
            "feature channels {} do not match prototype shape {pshape:?}",
            feat.channels
        )));
    }
    if k == 0 || !pshape[0].is_multiple_of(k) {
        return Err(PbipError::Shape(format!(
            "{} prototype rows are not a multiple of K = {k}",
            pshape[0]
        )));
    }
    let f = tape.l2_normalize_rows(feat.var, COSINE_EPS);
    let p = tape.l2_normalize_rows(prototypes, COSINE_EPS);
    let cos = tape.matmul_bt(f, p);
    Ok(tape.group_mean_cols(cos, k))
}

/// Confidence maps for every level from plain arrays.
///
/// `features[i]` is `(h_i, w_i, C_i)`; `prototypes[i]` is `(N, K, C_i)`.
pub fn similarity_masks(features: &[Array3<f64>], prototypes: &[Array3<f64>]) -> Result<Vec<Array3<f64>>> {
    if features.len() != prototypes.len() {
        return Err(PbipError::Shape(format!(
            "{} feature levels but {} prototype levels",
            features.len(),
            prototypes.len()
        )));
    }
    let mut tape = Tape::new();
    features
        .iter()
        .zip(prototypes)
        .map(|(f, p)| {
            let (h, w, c) = f.dim();
            let (n, k, cp) = p.dim();
            if c != cp {
                return Err(PbipError::Shape(format!("feature channels {c} vs prototype channels {cp}")));
            }
            let fv = tape.leaf(f.iter().copied().collect(), &[h * w, c]);
            let pv = tape.leaf(p.iter().copied().collect(), &[n * k, c]);
            let fm = FeatureMap {
                var: fv,
                height: h,
                width: w,
                channels: c,
            };
            let m = similarity_var(&mut tape, &fm, pv, k)?;
            Ok(Array3::from_shape_vec((h, w, n), tape.value(m).to_vec()).expect("mask shape"))
        })
        .collect()
}

/// Spatial mean of each level's per-class map: a `levels × N` array.
pub fn pooled_predictions(levels: &[Array3<f64>]) -> Array2<f64> {
    let n = levels.first().map_or(0, |l| l.dim().2);
    let mut out = Array2::zeros((levels.len(), n));
    for (i, level) in levels.iter().enumerate() {
        let (h, w, _) = level.dim();
        for c in 0..n {
            out[[i, c]] = level.slice(ndarray::s![.., .., c]).sum() / (h * w) as f64;
        }
    }
    out
}

pub(crate) fn check_binary(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(PbipError::Domain(format!("labels must be 0 or 1, found {v}")));
    }
    Ok(())
}

/// Classification loss on a `3 × N` node of pooled scores.
pub fn classification_loss_var(tape: &mut Tape, yhat: Var, y: &[f64], cfg: &ClsLossConfig) -> Result<Var> {
    check_binary(y)?;
    let rows = tape.shape(yhat)[0];
    let weights = &cfg.level_weights[..rows.min(3)];
    if weights.len() != rows {
        return Err(PbipError::Shape(format!("{rows} prediction levels, at most 3 supported")));
    }
    Ok(match cfg.kind {
        ClsLossKind::Bce => tape.bce_with_logits(yhat, y, cfg.logit_scale, weights),
        ClsLossKind::Softmax => {
            if y.iter().all(|&v| v == 0.0) {
                return Err(PbipError::EmptyLabel);
            }
            tape.softmax_ce(yhat, y, cfg.logit_scale, weights)
        }
    })
}

/// `Σ_i w_i · (1/N) Σ_n BCE(σ(s·ŷ[i,n]), y[n])` (or the softmax variant).
pub fn classification_loss(yhat: &Array2<f64>, y: &[f64], cfg: &ClsLossConfig) -> Result<f64> {
    let (l, n) = yhat.dim();
    if y.len() != n {
        return Err(PbipError::Shape(format!("{n} predicted classes but {} labels", y.len())));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(yhat.iter().copied().collect(), &[l, n]);
    let loss = classification_loss_var(&mut tape, z, y, cfg)?;
    Ok(tape.scalar(loss))
}

/// Learned `1×1` projection from features to class maps, used in place of
/// prototype similarity when that module is ablated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMaskHead {
    pub channel_dims: [usize; 3],
    pub n_classes: usize,
}

impl LinearMaskHead {
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e4d);
        for (i, &c) in self.channel_dims.iter().enumerate() {
            store.init_normal(&format!("head.level{}.weight", i + 1), &[c, self.n_classes], c, 1.0, &mut rng);
            store.init_zeros(&format!("head.level{}.bias", i + 1), &[self.n_classes]);
        }
    }

    pub fn forward_var(&self, tape: &mut Tape, params: &BoundParams, level: usize, feat: &FeatureMap) -> Var {
        let z = tape.matmul(feat.var, params.var(&format!("head.level{}.weight", level + 1)));
        tape.add_row_bias(z, params.var(&format!("head.level{}.bias", level + 1)))
    }
}

/// Writes every class channel of every level as a grayscale PNG, mapping
/// `[-1, 1]` onto `[0, 255]`.
pub fn dump_heatmaps(stack: &PseudoMaskStack, dir: &Path, id: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PbipError::io(dir, e))?;
    for (i, level) in stack.levels.iter().enumerate() {
        let (h, w, n) = level.dim();
        for c in 0..n {
            let mask = Array2::from_shape_fn((h, w), |(y, x)| (((level[[y, x, c]].clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8);
            crate::data::save_mask(&dir.join(format!("{id}_level{}_class{c}.png", i + 1)), &mask)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn pixel_matching_every_prototype_scores_one() {
        let proto = [0.3, -0.5, 0.8];
        let f = Array3::from_shape_fn((2, 2, 3), |(_, _, c)| proto[c] * 2.0);
        let p = Array3::from_shape_fn((2, 2, 3), |(n, _, c)| if n == 0 { proto[c] } else { -proto[c] + 0.1 * c as f64 });
        let m = &similarity_masks(&[f], &[p]).unwrap()[0];
        for y in 0..2 {
            for x in 0..2 {
                assert!((m[[y, x, 0]] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_prototypes_average_their_cosines() {
        // pixel (1, 0); prototypes at cos 0.8 and 0.4
        let f = Array3::from_shape_vec((1, 1, 2), vec![1.0, 0.0]).unwrap();
        let a = 0.8f64;
        let b = 0.4f64;
        let p = Array3::from_shape_vec((1, 2, 2), vec![a, (1.0 - a * a).sqrt(), b, -(1.0 - b * b).sqrt()]).unwrap();
        let m = &similarity_masks(&[f], &[p]).unwrap()[0];
        assert!((m[[0, 0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let f = Array3::zeros((2, 2, 3));
        let p = Array3::ones((2, 1, 4));
        assert!(matches!(similarity_masks(&[f], &[p]), Err(PbipError::Shape(_))));
    }

    #[test]
    fn pooling_cases() {
        let constant = Array3::from_elem((4, 4, 2), 0.3);
        let yhat = pooled_predictions(&[constant]);
        assert!((yhat[[0, 0]] - 0.3).abs() < 1e-12);
        let checker = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| ((y + x) % 2) as f64);
        assert_eq!(pooled_predictions(&[checker])[[0, 0]], 0.5);
    }

    #[test]
    fn classification_loss_reference_values() {
        let cfg = ClsLossConfig::default();
        let zero = Array2::zeros((3, 4));
        let l = classification_loss(&zero, &[1.0, 0.0, 0.0, 1.0], &cfg).unwrap();
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let big = Array2::from_elem((3, 2), 100.0);
        assert!(classification_loss(&big, &[1.0, 1.0], &cfg).unwrap() < 1e-12);
        assert!(matches!(
            classification_loss(&zero, &[0.5, 0.0, 0.0, 1.0], &cfg),
            Err(PbipError::Domain(_))
        ));
    }

    #[test]
    fn classification_loss_gradient_matches_fd() {
        let cfg = ClsLossConfig::default();
        let y = [1.0, 0.0, 1.0];
        let yhat: Vec<f64> = (0..9).map(|i| (i as f64 * 0.61).sin() * 0.3).collect();
        let mut tape = Tape::new();
        let z = tape.leaf(yhat.clone(), &[3, 3]);
        let l = classification_loss_var(&mut tape, z, &y, &cfg).unwrap();
        tape.backward(l);
        let g = tape.grad(z);
        for i in 0..9 {
            let f = |d: f64| {
                let mut v = yhat.clone();
                v[i] += d;
                classification_loss(&Array2::from_shape_vec((3, 3), v).unwrap(), &y, &cfg).unwrap()
            };
            let h = 1e-6;
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    fn arr3(dims: (usize, usize, usize)) -> impl Strategy<Value = Array3<f64>> {
        proptest::collection::vec(-2.0f64..2.0, dims.0 * dims.1 * dims.2).prop_map(move |v| Array3::from_shape_vec(dims, v).unwrap())
    }

    proptest! {
        #[test]
        fn matches_pixel_loop_and_is_scale_invariant(
            f in arr3((3, 2, 4)),
            p in arr3((2, 3, 4)),
            scale in 0.1f64..20.0,
        ) {
            let m = &similarity_masks(std::slice::from_ref(&f), std::slice::from_ref(&p)).unwrap()[0];
            for y in 0..3 {
                for x in 0..2 {
                    for n in 0..2 {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            let (mut dot, mut a, mut b) = (0.0, 0.0, 0.0);
                            for c in 0..4 {
                                dot += f[[y, x, c]] * p[[n, k, c]];
                                a += f[[y, x, c]] * f[[y, x, c]];
                                b += p[[n, k, c]] * p[[n, k, c]];
                            }
                            acc += dot / (a.sqrt().max(COSINE_EPS) * b.sqrt().max(COSINE_EPS));
                        }
                        let v = m[[y, x, n]];
                        prop_assert!((v - acc / 3.0).abs() < 1e-9);
                        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
                    }
                }
            }
            let scaled = &similarity_masks(&[f.mapv(|v| v * scale)], &[p]).unwrap()[0];
            for (a, b) in m.iter().zip(scaled.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
