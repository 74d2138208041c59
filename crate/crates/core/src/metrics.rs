//! Segmentation metrics over class-index masks and multi-seed statistics.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{self, Mask};
use crate::error::{PbipError, Result};

/// Pixel counts indexed by `(gt, pred)`. Predictions equal to `N` (the
/// ignore value) land in an extra column and count as misses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub n_classes: usize,
    /// Row-major `N × (N + 1)`.
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * (n_classes + 1)],
            ignored: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.n_classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair. Ground-truth pixels equal to
    /// `N` are skipped.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(PbipError::Shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
        }
        let n = self.n_classes;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p > n || g > n {
                return Err(PbipError::Domain(format!("mask value outside [0, {n}]: pred {p}, gt {g}")));
            }
            if g == n {
                self.ignored += 1;
                continue;
            }
            self.counts[g * (n + 1) + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(PbipError::Shape("cannot merge accumulators with different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// IoU-derived scores. Entries for classes absent from both prediction and
/// ground truth are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouFamily {
    pub iou: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
    pub mean_dice: f64,
}

pub fn compute_iou_family(acc: &ConfusionAccumulator) -> Result<IouFamily> {
    let total = acc.total();
    if total == 0 {
        return Err(PbipError::Domain("no scored pixels".into()));
    }
    let n = acc.n_classes;
    let mut iou = vec![None; n];
    let mut dice = vec![None; n];
    let mut fwiou = 0.0;
    for c in 0..n {
        let tp = acc.get(c, c) as f64;
        let gt: u64 = (0..=n).map(|p| acc.get(c, p)).sum();
        let pred: u64 = (0..n).map(|g| acc.get(g, c)).sum();
        let fn_ = gt as f64 - tp;
        let fp = pred as f64 - tp;
        if gt + pred == 0 {
            continue;
        }
        let v = tp / (tp + fp + fn_);
        iou[c] = Some(v);
        dice[c] = Some(2.0 * tp / (2.0 * tp + fp + fn_));
        fwiou += gt as f64 / total as f64 * v;
    }
    let mean = |v: &[Option<f64>]| {
        let s: Vec<f64> = v.iter().flatten().copied().collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    Ok(IouFamily {
        miou: mean(&iou),
        mean_dice: mean(&dice),
        iou,
        dice,
        fwiou,
    })
}

/// Pixels of `region` with a 4-neighbour outside it. Image borders do not
/// create boundary.
fn boundary(region: &Array2<bool>) -> Array2<bool> {
    let (h, w) = region.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !region[[y, x]] {
            return false;
        }
        let out =
            |yy: isize, xx: isize| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && !region[[yy as usize, xx as usize]];
        let (y, x) = (y as isize, x as isize);
        out(y - 1, x) || out(y + 1, x) || out(y, x - 1) || out(y, x + 1)
    })
}

/// Pixels within Euclidean distance `radius` of any set pixel.
fn dilate(set: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = set.dim();
    let r = radius as isize;
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &v) in set.indexed_iter() {
        if !v {
            continue;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[[yy as usize, xx as usize]] = true;
                }
            }
        }
    }
    out
}

/// Per-class boundary intersection and union counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryAccumulator {
    pub radius: usize,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Pixels in the boundary band of each class.
    pub support: Vec<u64>,
}

impl BoundaryAccumulator {
    pub fn new(n_classes: usize, radius: usize) -> Self {
        Self {
            radius,
            intersection: vec![0; n_classes],
            union: vec![0; n_classes],
            support: vec![0; n_classes],
        }
    }

    /// Adds one mask pair. Pixels whose ground truth is the ignore value are
    /// left out of every band.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(PbipError::Shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
        }
        let n = self.intersection.len();
        let valid = gt.mapv(|g| (g as usize) < n);
        for c in 0..n {
            let p = pred.mapv(|v| v as usize == c);
            let g = gt.mapv(|v| v as usize == c);
            let band_p = dilate(&boundary(&p), self.radius);
            let band_g = dilate(&boundary(&g), self.radius);
            for ((y, x), &ok) in valid.indexed_iter() {
                if !ok || !(band_p[[y, x]] || band_g[[y, x]]) {
                    continue;
                }
                self.support[c] += 1;
                let (a, b) = (p[[y, x]], g[[y, x]]);
                self.intersection[c] += u64::from(a && b);
                self.union[c] += u64::from(a || b);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BoundaryAccumulator) -> Result<()> {
        if other.intersection.len() != self.intersection.len() || other.radius != self.radius {
            return Err(PbipError::Shape("cannot merge boundary accumulators of different shape".into()));
        }
        for c in 0..self.intersection.len() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
            self.support[c] += other.support[c];
        }
        Ok(())
    }

    /// Per-class boundary IoU (`None` without boundary support) and their mean.
    pub fn scores(&self) -> (Vec<Option<f64>>, Option<f64>) {
        let per: Vec<Option<f64>> = (0..self.intersection.len())
            .map(|c| {
                if self.support[c] == 0 {
                    None
                } else if self.union[c] == 0 {
                    Some(1.0)
                } else {
                    Some(self.intersection[c] as f64 / self.union[c] as f64)
                }
            })
            .collect();
        let vals: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        (per, mean)
    }
}

/// Boundary IoU of a single mask pair.
pub fn boundary_iou(pred: &Mask, gt: &Mask, n_classes: usize, radius: usize) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let mut acc = BoundaryAccumulator::new(n_classes, radius);
    acc.accumulate(pred, gt)?;
    Ok(acc.scores())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided p-value of Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(PbipError::Domain("each sample needs at least two values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(PbipError::Domain("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| PbipError::Domain(e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub class_names: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
    pub biou: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
    pub mean_biou: Option<f64>,
    pub mean_dice: f64,
    pub pixels: u64,
}

impl RunMetrics {
    pub fn from_accumulators(class_names: &[String], confusion: &ConfusionAccumulator, boundary: &BoundaryAccumulator) -> Result<Self> {
        let fam = compute_iou_family(confusion)?;
        let (biou, mean_biou) = boundary.scores();
        Ok(Self {
            class_names: class_names.to_vec(),
            iou: fam.iou,
            dice: fam.dice,
            biou,
            miou: fam.miou,
            fwiou: fam.fwiou,
            mean_biou,
            mean_dice: fam.mean_dice,
            pixels: confusion.total(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// One or more seeds of the same method, with optional significance
/// against a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunMetrics>,
    pub miou: MeanStd,
    pub fwiou: MeanStd,
    pub biou: Option<MeanStd>,
    pub dice: MeanStd,
    pub p_value: Option<f64>,
}

impl EvalReport {
    pub fn new(runs: Vec<RunMetrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(PbipError::Domain("report needs at least one run".into()));
        }
        let col = |f: &dyn Fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let biou: Option<Vec<f64>> = runs.iter().map(|r| r.mean_biou).collect();
        Ok(Self {
            miou: col(&|r| r.miou),
            fwiou: col(&|r| r.fwiou),
            dice: col(&|r| r.mean_dice),
            biou: biou.map(|b| MeanStd::of(&b)),
            p_value: None,
            runs,
        })
    }

    /// Sets the Welch p-value of mIoU against `baseline`.
    pub fn compare(&mut self, baseline: &EvalReport) -> Result<f64> {
        let a: Vec<f64> = self.runs.iter().map(|r| r.miou).collect();
        let b: Vec<f64> = baseline.runs.iter().map(|r| r.miou).collect();
        let p = welch_t_test(&a, &b)?;
        self.p_value = Some(p);
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Accumulates confusion and boundary counts over mask pairs in parallel.
pub fn evaluate_pairs(pairs: &[(Mask, Mask)], n_classes: usize, radius: usize) -> Result<(ConfusionAccumulator, BoundaryAccumulator)> {
    let parts: Vec<(ConfusionAccumulator, BoundaryAccumulator)> = pairs
        .par_iter()
        .map(|(p, g)| {
            let mut c = ConfusionAccumulator::new(n_classes);
            let mut b = BoundaryAccumulator::new(n_classes, radius);
            c.accumulate(p, g)?;
            b.accumulate(p, g)?;
            Ok((c, b))
        })
        .collect::<Result<_>>()?;
    let mut conf = ConfusionAccumulator::new(n_classes);
    let mut bnd = BoundaryAccumulator::new(n_classes, radius);
    for (c, b) in &parts {
        conf.merge(c)?;
        bnd.merge(b)?;
    }
    Ok((conf, bnd))
}

/// Scores every `<id>.png` in `pred_dir` against `gt_dir/<id>.png`. A
/// ground-truth mask without a prediction is an error.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, class_names: &[String], radius: usize) -> Result<RunMetrics> {
    let mut gts: Vec<_> = std::fs::read_dir(gt_dir)
        .map_err(|e| PbipError::io(gt_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    gts.sort();
    if gts.is_empty() {
        return Err(PbipError::NoRecords(gt_dir.to_path_buf()));
    }
    let pairs: Vec<(Mask, Mask)> = gts
        .par_iter()
        .map(|g| {
            let name = g.file_name().expect("file name");
            let p = pred_dir.join(name);
            if !p.exists() {
                return Err(PbipError::Record {
                    path: p,
                    reason: "no prediction for this ground-truth mask".into(),
                });
            }
            Ok((data::load_mask(&p)?, data::load_mask(g)?))
        })
        .collect::<Result<_>>()?;
    let (conf, bnd) = evaluate_pairs(&pairs, class_names.len(), radius)?;
    RunMetrics::from_accumulators(class_names, &conf, &bnd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn acc_of(pred: &Mask, gt: &Mask, n: usize) -> ConfusionAccumulator {
        let mut a = ConfusionAccumulator::new(n);
        a.accumulate(pred, gt).unwrap();
        a
    }

    #[test]
    fn two_by_two_hand_case() {
        let pred = array![[0u8, 0], [1, 1]];
        let gt = array![[0u8, 1], [1, 1]];
        let a = acc_of(&pred, &gt, 2);
        assert_eq!((a.get(0, 0), a.get(0, 1), a.get(1, 0), a.get(1, 1)), (1, 0, 1, 2));
        let f = compute_iou_family(&a).unwrap();
        assert!((f.iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((f.iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((f.miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn ignore_and_empty_cases() {
        let gt = Array2::from_elem((3, 3), 2u8);
        let pred = Array2::zeros((3, 3));
        let a = acc_of(&pred, &gt, 2);
        assert_eq!(a.total(), 0);
        assert_eq!(a.ignored, 9);
        assert!(compute_iou_family(&a).is_err());
        let mut b = ConfusionAccumulator::new(2);
        assert!(b.accumulate(&Array2::from_elem((2, 2), 5u8), &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn perfect_prediction() {
        let gt = array![[0u8, 1, 2], [2, 1, 0]];
        let f = compute_iou_family(&acc_of(&gt, &gt, 3)).unwrap();
        assert_eq!((f.miou, f.fwiou, f.mean_dice), (1.0, 1.0, 1.0));
    }

    #[test]
    fn welch_cases() {
        let a = [1.0, 2.0, 3.0];
        assert!((welch_t_test(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let p = welch_t_test(&[1.0, 1.01, 0.99], &[2.0, 2.01, 1.99]).unwrap();
        assert!(p < 0.001);
        assert!(welch_t_test(&[1.0], &a).is_err());
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn boundary_cases() {
        let gt = Array2::from_shape_fn((8, 8), |(_, x)| u8::from(x >= 4));
        let (per, mean) = boundary_iou(&gt, &gt, 2, 2).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0)]);
        assert_eq!(mean, Some(1.0));

        let constant = Array2::zeros((6, 6));
        let (per, mean) = boundary_iou(&constant, &constant, 2, 2).unwrap();
        assert_eq!(per, vec![None, None]);
        assert_eq!(mean, None);

        // thin stripe at column 1 versus a prediction at column 7
        let stripe = |c: usize| Array2::from_shape_fn((10, 10), |(_, x)| u8::from(x == c));
        let (per, _) = boundary_iou(&stripe(7), &stripe(1), 2, 2).unwrap();
        assert_eq!(per[1], Some(0.0));
    }

    fn mask_strategy(n: u8) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(0..n, 36).prop_map(|v| Array2::from_shape_vec((6, 6), v).unwrap())
    }

    proptest! {
        #[test]
        fn dice_iou_identity(pred in mask_strategy(3), gt in mask_strategy(3)) {
            let f = compute_iou_family(&acc_of(&pred, &gt, 3)).unwrap();
            for (i, d) in f.iou.iter().zip(&f.dice) {
                if let (Some(i), Some(d)) = (i, d) {
                    prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn permutation_invariance(pred in mask_strategy(3), gt in mask_strategy(3)) {
            let perm = [2u8, 0, 1];
            let f = compute_iou_family(&acc_of(&pred, &gt, 3)).unwrap();
            let g = compute_iou_family(&acc_of(&pred.mapv(|v| perm[v as usize]), &gt.mapv(|v| perm[v as usize]), 3)).unwrap();
            prop_assert!((f.miou - g.miou).abs() < 1e-12);
            prop_assert!((f.fwiou - g.fwiou).abs() < 1e-12);
            let (_, ba) = boundary_iou(&pred, &gt, 3, 1).unwrap();
            let (_, bb) = boundary_iou(&pred.mapv(|v| perm[v as usize]), &gt.mapv(|v| perm[v as usize]), 3, 1).unwrap();
            prop_assert_eq!(ba.map(|v| (v * 1e9).round()), bb.map(|v| (v * 1e9).round()));
        }

        #[test]
        fn mean_bounds(pred in mask_strategy(3), gt in mask_strategy(3)) {
            let f = compute_iou_family(&acc_of(&pred, &gt, 3)).unwrap();
            let vals: Vec<f64> = f.iou.iter().flatten().copied().collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.miou <= hi + 1e-12);
            prop_assert!(f.fwiou >= lo - 1e-12 && f.fwiou <= hi + 1e-12);
        }

        #[test]
        fn accumulation_is_additive(a in mask_strategy(3), b in mask_strategy(3), c in mask_strategy(3), d in mask_strategy(3)) {
            let mut joint = ConfusionAccumulator::new(3);
            joint.accumulate(&a, &b).unwrap();
            joint.accumulate(&c, &d).unwrap();
            let mut split = acc_of(&a, &b, 3);
            split.merge(&acc_of(&c, &d, 3)).unwrap();
            prop_assert_eq!(joint, split);
        }
    }
}
