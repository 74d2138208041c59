//! Patch classification by mean cosine similarity to class prototypes.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::ImageBank;
use crate::data::{is_single_class, PatchRecord};
use crate::encoders::PrototypeEncoder;
use crate::error::{PbipError, Result};
use crate::simnet::COSINE_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub scores: Vec<f64>,
    pub predicted: usize,
}

/// Scores an embedding against every class: the mean over `K` of the cosine
/// to each prototype. Ties go to the lowest class index.
pub fn classify_embedding(embedding: &[f64], prototypes: &Array3<f64>) -> Result<ZeroShotResult> {
    let (n, k, d) = prototypes.dim();
    if embedding.len() != d {
        return Err(PbipError::Shape(format!("embedding has {} dims, prototypes {d}", embedding.len())));
    }
    let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= COSINE_EPS {
        return Err(PbipError::Domain("embedding has zero norm".into()));
    }
    let scores: Vec<f64> = (0..n)
        .map(|c| {
            (0..k)
                .map(|j| {
                    let p = prototypes.slice(ndarray::s![c, j, ..]);
                    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
                    p.iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>() / (pn * norm)
                })
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let mut predicted = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[predicted] {
            predicted = c;
        }
    }
    Ok(ZeroShotResult { scores, predicted })
}

pub fn zeroshot_classify(image: &crate::data::Image, encoder: &dyn PrototypeEncoder, prototypes: &Array3<f64>) -> Result<ZeroShotResult> {
    classify_embedding(&encoder.encode(image)?, prototypes)
}

/// One-vs-rest F1 per class. Classes without ground-truth support are `None`;
/// a supported class that is never predicted correctly scores zero.
pub fn f1_scores(predicted: &[usize], truth: &[usize], n_classes: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let support = truth.iter().filter(|&&t| t == c).count();
            if support == 0 {
                return None;
            }
            let tp = predicted.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
            let pred = predicted.iter().filter(|&&p| p == c).count() as f64;
            if tp == 0.0 {
                return Some(0.0);
            }
            let precision = tp / pred;
            let recall = tp / support as f64;
            Some(2.0 * precision * recall / (precision + recall))
        })
        .collect();
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let macro_f1 = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    (per, macro_f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub class_names: Vec<String>,
    pub f1: Vec<Option<f64>>,
    pub macro_f1: Option<f64>,
    pub accuracy: f64,
    pub support: Vec<usize>,
    pub evaluated: usize,
    pub skipped_multi_class: usize,
}

impl ZeroShotReport {
    /// Tab-separated table with one row per class and a closing mean row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::from("class\tsupport\tf1\n");
        for (i, name) in self.class_names.iter().enumerate() {
            out.push_str(&format!("{name}\t{}\t{}\n", self.support[i], fmt(self.f1[i])));
        }
        out.push_str(&format!("mean\t{}\t{}\n", self.evaluated, fmt(self.macro_f1)));
        out
    }
}

fn report(class_names: &[String], predicted: &[usize], truth: &[usize], skipped: usize) -> ZeroShotReport {
    let n = class_names.len();
    let (f1, macro_f1) = f1_scores(predicted, truth, n);
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    ZeroShotReport {
        class_names: class_names.to_vec(),
        f1,
        macro_f1,
        accuracy: correct as f64 / truth.len().max(1) as f64,
        support: (0..n).map(|c| truth.iter().filter(|&&t| t == c).count()).collect(),
        evaluated: truth.len(),
        skipped_multi_class: skipped,
    }
}

/// Classifies every single-class record; multi-class records are skipped.
pub fn zeroshot_eval(
    records: &[&PatchRecord],
    class_names: &[String],
    encoder: &dyn PrototypeEncoder,
    prototypes: &Array3<f64>,
) -> Result<ZeroShotReport> {
    let single: Vec<&PatchRecord> = records.iter().copied().filter(|r| is_single_class(r)).collect();
    if single.is_empty() {
        return Err(PbipError::Domain("no single-class patches to classify".into()));
    }
    let results: Vec<(usize, usize)> = single
        .par_iter()
        .map(|r| {
            let truth = r.classes().next().expect("single class");
            Ok((zeroshot_classify(&r.image, encoder, prototypes)?.predicted, truth))
        })
        .collect::<Result<_>>()?;
    let (pred, truth): (Vec<usize>, Vec<usize>) = results.into_iter().unzip();
    Ok(report(class_names, &pred, &truth, records.len() - single.len()))
}

/// Classifies the stored features of every bank member.
pub fn bank_self_consistency(bank: &ImageBank, prototypes: &Array3<f64>) -> Result<ZeroShotReport> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (c, subs) in bank.entries.iter().enumerate() {
        for e in subs.iter().flatten() {
            pred.push(classify_embedding(&e.feature, prototypes)?.predicted);
            truth.push(c);
        }
    }
    Ok(report(&bank.class_names, &pred, &truth, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn protos() -> Array3<f64> {
        Array3::from_shape_fn((3, 2, 3), |(c, k, j)| if j == c { 1.0 } else { 0.1 * k as f64 })
    }

    #[test]
    fn nearest_class_wins() {
        let r = classify_embedding(&[0.0, 2.0, 0.1], &protos()).unwrap();
        assert_eq!(r.predicted, 1);
        assert!(classify_embedding(&[0.0; 3], &protos()).is_err());
    }

    #[test]
    fn duplicated_class_ties_to_lower_index() {
        let mut p = protos();
        let row = p.slice(ndarray::s![2, .., ..]).to_owned();
        p.slice_mut(ndarray::s![0, .., ..]).assign(&row);
        let r = classify_embedding(&[0.0, 0.0, 1.0], &p).unwrap();
        assert_eq!(r.scores[0], r.scores[2]);
        assert_eq!(r.predicted, 0);
    }

    #[test]
    fn f1_reference_cases() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let (per, mean) = f1_scores(&truth, &truth, 4);
        assert!(per.iter().all(|v| *v == Some(1.0)));
        assert_eq!(mean, Some(1.0));
        let (per, mean) = f1_scores(&[0; 8], &truth, 4);
        assert!((per[0].unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(&per[1..], &[Some(0.0); 3]);
        let listed: f64 = per.iter().flatten().sum::<f64>() / 4.0;
        assert!((mean.unwrap() - listed).abs() < 1e-9);
        let (per, _) = f1_scores(&[0, 0], &[0, 0], 2);
        assert_eq!(per[1], None);
    }

    proptest! {
        #[test]
        fn scale_and_monotone_invariance(e in proptest::collection::vec(-1.0f64..1.0, 3), s in 0.1f64..10.0) {
            prop_assume!(e.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let a = classify_embedding(&e, &protos()).unwrap();
            let scaled: Vec<f64> = e.iter().map(|v| v * s).collect();
            let b = classify_embedding(&scaled, &protos()).unwrap();
            prop_assert_eq!(a.predicted, b.predicted);
            let mut best = 0;
            for (c, v) in a.scores.iter().map(|v| (3.0 * v).exp()).enumerate() {
                if v > (3.0 * a.scores[best]).exp() { best = c; }
            }
            prop_assert_eq!(best, a.predicted);
        }
    }
}
