//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion not listed in `KNOWN_UNMET` fails.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use pbip::ablation::{run_ablation, AblationParam, AblationSpec};
use pbip::autodiff::{Reduce, Tape};
use pbip::bank::kmeans_cosine;
use pbip::config::TrainConfig;
use pbip::data::{load_manifest, DatasetManifest, FormatHint, Image, Mask, Split};
use pbip::encoders::{ParamStore, PrototypeEncoder, ToyPrototypeEncoder};
use pbip::matchnet::{adaptive_threshold, separate, MatchConfig, ThresholdScope};
use pbip::metrics::{boundary_iou, compute_iou_family, ConfusionAccumulator};
use pbip::model::{LossVars, PbipModel};
use pbip::pipeline::{run_pipeline, PipelineResult};
use pbip::simnet::similarity_masks;
use pbip::supervised::{train_supervised, SupervisedConfig};
use pbip::synth::{generate_synthetic, SyntheticSpec};
use pbip::train::export_pseudo_masks;
use pbip::zeroshot::bank_self_consistency;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria whose failure is recorded rather than fatal, with the reason
/// printed next to the result.
const KNOWN_UNMET: &[(usize, &str)] = &[];

/// Learning rate of the end-to-end runs. A randomly initialised toy
/// backbone does not train within 200 steps at 1e-5.
const DESK_LR: f64 = 5e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Best spherical k-means objective over every assignment of points to
/// `k` non-empty clusters. The optimal centre of a cluster is its mean
/// direction, so a cluster costs `|S| - |Σ x̂|`.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let m = points.len();
    let d = points[0].len();
    let unit_pts: Vec<Vec<f64>> = points.iter().map(|p| unit(p)).collect();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; m];
    loop {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums[a][j] += unit_pts[i][j];
            }
        }
        if counts.iter().all(|&c| c > 0) {
            let cost: f64 = (0..k)
                .map(|c| counts[c] as f64 - sums[c].iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum();
            best = best.min(cost);
        }
        let mut i = 0;
        while i < m {
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == m {
            return best;
        }
    }
}

fn criterion_1() -> Outcome {
    let (mut optimal, mut worst) = (0, 0.0f64);
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let m = r.random_range(5..=8);
        let k = 2 + (seed as usize % 2);
        let pts: Vec<Vec<f64>> = (0..m).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let feats = Array2::from_shape_fn((m, 4), |(i, j)| pts[i][j]);
        let got = kmeans_cosine(&feats, k, seed).expect("kmeans").objective;
        let best = exhaustive_optimum(&pts, k);
        if got <= best + 1e-9 {
            optimal += 1;
        }
        worst = worst.max((got - best) / best.max(1e-12));
    }
    outcome(
        optimal >= 18 && worst <= 0.05,
        format!("{optimal}/20 optimal, worst excess {:.2}%", 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut max_err = 0.0f64;
    for inst in 0..50u64 {
        let mut r = rng(2000 + inst);
        let (h, w, c) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..8));
        let (n, k) = (r.random_range(1..5), r.random_range(1..4));
        let f = Array3::from_shape_fn((h, w, c), |_| r.random_range(-3.0..3.0));
        let p = Array3::from_shape_fn((n, k, c), |_| r.random_range(-3.0..3.0));
        let m = &similarity_masks(std::slice::from_ref(&f), std::slice::from_ref(&p)).expect("masks")[0];
        for y in 0..h {
            for x in 0..w {
                for cls in 0..n {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let mut dot = 0.0;
                        let mut nf = 0.0;
                        let mut np = 0.0;
                        for ch in 0..c {
                            dot += f[[y, x, ch]] * p[[cls, j, ch]];
                            nf += f[[y, x, ch]].powi(2);
                            np += p[[cls, j, ch]].powi(2);
                        }
                        acc += dot / (nf.sqrt().max(1e-8) * np.sqrt().max(1e-8));
                    }
                    max_err = max_err.max((m[[y, x, cls]] - acc / k as f64).abs());
                }
            }
        }
    }
    outcome(max_err <= 1e-6, format!("max abs error {max_err:.2e} over 50 instances"))
}

// ---------------------------------------------------------------- 3

fn losses(model: &PbipModel, params: &ParamStore, image: &Image, label: &[u8]) -> [f64; 4] {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = model.loss_var(&mut tape, &bound, image, label).expect("loss");
    let t = v.terms(&tape);
    [t.l_cls, t.fgs, t.bgs, t.l_total]
}

fn criterion_3() -> Outcome {
    let cfg = TrainConfig {
        embed_dim: 32,
        k: 2,
        channel_dims: [8, 12, 16],
        ..TrainConfig::default()
    };
    let encoder: Arc<dyn PrototypeEncoder> = Arc::new(ToyPrototypeEncoder::with_dim(3, 32));
    let mut r = rng(3000);
    let protos = Array3::from_shape_fn((3, 2, 32), |_| r.random_range(-1.0..1.0));
    let model = PbipModel::new(&cfg, protos, encoder).expect("model");
    let params = model.init_params(7);
    let image = Image::from_shape_fn((16, 16, 3), |(y, x, c)| {
        let left = x < 8;
        0.2 + 0.5 * if left { [0.9, 0.2, 0.3][c] } else { [0.2, 0.3, 0.9][c] } + 0.05 * ((y * 7 + x * 3 + c) % 5) as f64
    } as f32);
    let label = [1u8, 0, 1];

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars: LossVars = model.loss_var(&mut tape, &bound, &image, &label).expect("loss");
    let nodes = [vars.l_cls, vars.fgs.expect("fgs"), vars.bgs.expect("bgs"), vars.total];
    let analytic: Vec<_> = nodes
        .iter()
        .map(|&v| {
            tape.backward(v);
            bound.grads(&tape)
        })
        .collect();

    let h = 1e-6;
    let mut worst = [0.0f64; 4];
    let mut checked = 0;
    let mut sampler = rng(3001);
    for (name, p) in params.iter() {
        if !(name.starts_with("backbone.") || name.starts_with("projector.")) {
            continue;
        }
        for _ in 0..6 {
            let idx = sampler.random_range(0..p.data.len());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data[idx] -= h;
            let (lp, lm) = (losses(&model, &plus, &image, &label), losses(&model, &minus, &image, &label));
            for t in 0..4 {
                let fd = (lp[t] - lm[t]) / (2.0 * h);
                let an = analytic[t].get(name).map_or(0.0, |g| g[idx]);
                let scale = fd.abs().max(an.abs());
                let rel = if scale < 1e-7 { 0.0 } else { (fd - an).abs() / scale };
                worst[t] = worst[t].max(rel);
            }
            checked += 1;
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-3);
    outcome(
        pass,
        format!(
            "{checked} entries; worst relative error cls {:.1e} fgs {:.1e} bgs {:.1e} total {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 4

/// `-ln(e^{a} / (e^{a} + e^{b}))` as written, or as a max-shifted
/// log-sum-exp when any exponential leaves the normal range.
fn direct_two_way(sff: f64, sfb: f64, temp: f64) -> f64 {
    let (a, b) = (sff / temp, sfb / temp);
    let (ea, eb) = (a.exp(), b.exp());
    let ratio = ea / (ea + eb);
    if ea.is_normal() && eb.is_normal() && (ea + eb).is_normal() && ratio.is_normal() {
        return -ratio.ln();
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln() - a
}

fn criterion_4() -> Outcome {
    let mut r = rng(4000);
    let mut worst = 0.0f64;
    let mut overflow = 0;
    for i in 0..1000 {
        let (sff, sfb): (f64, f64) = (r.random_range(-50.0..50.0), r.random_range(-50.0..50.0));
        let temp: f64 = if i % 4 == 0 {
            r.random_range(0.01..0.1)
        } else {
            r.random_range(0.1..5.0)
        };
        if (sff / temp).abs() > 709.0 || (sfb / temp).abs() > 709.0 {
            overflow += 1;
        }
        let mut got = [0.0; 2];
        for (slot, reduce) in [Reduce::Sum, Reduce::Mean].into_iter().enumerate() {
            let mut tape = Tape::new();
            let s = tape.leaf(vec![sff, sfb], &[1, 2]);
            let l = tape.contrastive_rows(s, &[0], 1, temp, reduce, reduce);
            got[slot] = tape.scalar(l);
        }
        let want = direct_two_way(sff, sfb, temp);
        for g in got {
            let err = if g.is_finite() {
                (g - want).abs() / want.abs().max(1.0)
            } else {
                f64::INFINITY
            };
            worst = worst.max(err);
        }
    }
    outcome(
        worst <= 1e-9,
        format!("1000 triples ({overflow} beyond exp range), worst error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 5

fn brute_iou(pred: &Mask, gt: &Mask, n: usize) -> Vec<Option<f64>> {
    (0..n)
        .map(|c| {
            let mut inter = 0u64;
            let mut uni = 0u64;
            for (&p, &g) in pred.iter().zip(gt.iter()) {
                if g as usize >= n {
                    continue;
                }
                let (a, b) = (p as usize == c, g as usize == c);
                inter += u64::from(a && b);
                uni += u64::from(a || b);
            }
            (uni > 0).then(|| inter as f64 / uni as f64)
        })
        .collect()
}

/// Boundary IoU by direct enumeration: a pixel lies in a class band when it
/// is within the radius of a class pixel that touches a non-class
/// 4-neighbour inside the image.
fn brute_biou(pred: &Mask, gt: &Mask, n: usize, radius: usize) -> Vec<Option<f64>> {
    let (h, w) = pred.dim();
    let in_band = |m: &Mask, c: usize, y: usize, x: usize| -> bool {
        for py in 0..h {
            for px in 0..w {
                if m[[py, px]] as usize != c {
                    continue;
                }
                let edge = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (qy, qx) = (py as isize + dy, px as isize + dx);
                    qy >= 0 && qx >= 0 && (qy as usize) < h && (qx as usize) < w && m[[qy as usize, qx as usize]] as usize != c
                });
                let d2 = (py as isize - y as isize).pow(2) + (px as isize - x as isize).pow(2);
                if edge && d2 <= (radius * radius) as isize {
                    return true;
                }
            }
        }
        false
    };
    (0..n)
        .map(|c| {
            let (mut inter, mut uni, mut support) = (0u64, 0u64, 0u64);
            for y in 0..h {
                for x in 0..w {
                    if gt[[y, x]] as usize >= n || !(in_band(pred, c, y, x) || in_band(gt, c, y, x)) {
                        continue;
                    }
                    support += 1;
                    let (a, b) = (pred[[y, x]] as usize == c, gt[[y, x]] as usize == c);
                    inter += u64::from(a && b);
                    uni += u64::from(a || b);
                }
            }
            match (support, uni) {
                (0, _) => None,
                (_, 0) => Some(1.0),
                _ => Some(inter as f64 / uni as f64),
            }
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut failures = Vec::new();
    // Hand-computed reference.
    let pred = Mask::from_shape_vec((2, 2), vec![0, 0, 1, 1]).unwrap();
    let gt = Mask::from_shape_vec((2, 2), vec![0, 1, 1, 1]).unwrap();
    let mut acc = ConfusionAccumulator::new(2);
    acc.accumulate(&pred, &gt).unwrap();
    let fam = compute_iou_family(&acc).unwrap();
    if fam.iou != vec![Some(0.5), Some(2.0 / 3.0)] || (fam.miou - 7.0 / 12.0).abs() > 1e-15 {
        failures.push("2×2 hand case".to_string());
    }
    if (fam.fwiou - (0.25 * 0.5 + 0.75 * 2.0 / 3.0)).abs() > 1e-15 {
        failures.push("2×2 FwIoU".to_string());
    }

    let mut r = rng(5000);
    let mut identity_worst = 0.0f64;
    for case in 0..100 {
        let (h, w, n) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(2..=4));
        let pred = Mask::from_shape_fn((h, w), |_| r.random_range(0..n as u8));
        let gt = Mask::from_shape_fn((h, w), |_| if r.random_bool(0.1) { n as u8 } else { r.random_range(0..n as u8) });
        if gt.iter().all(|&g| g as usize == n) {
            continue;
        }
        let mut acc = ConfusionAccumulator::new(n);
        acc.accumulate(&pred, &gt).unwrap();
        let fam = compute_iou_family(&acc).unwrap();
        if fam.iou != brute_iou(&pred, &gt, n) {
            failures.push(format!("IoU case {case}"));
        }
        for (i, d) in fam.iou.iter().zip(&fam.dice) {
            if let (Some(i), Some(d)) = (i, d) {
                identity_worst = identity_worst.max((d - 2.0 * i / (1.0 + i)).abs());
            }
        }
        let radius = case % 3;
        let (got, _) = boundary_iou(&pred, &gt, n, radius).unwrap();
        if got != brute_biou(&pred, &gt, n, radius) {
            failures.push(format!("bIoU case {case}"));
        }
    }
    if identity_worst > 1e-9 {
        failures.push(format!("Dice identity off by {identity_worst:.1e}"));
    }
    let detail = if failures.is_empty() {
        format!("hand case, 100 brute-force pairs, Dice identity within {identity_worst:.1e}")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut r = rng(6000);
    let mut failures = Vec::new();
    for case in 0..100 {
        let (h, w, n) = (r.random_range(2..10), r.random_range(2..10), r.random_range(2..5));
        let m = Array3::from_shape_fn((h, w, n), |_| r.random_range(-0.5..3.0));
        let image = Image::from_shape_fn((h, w, 3), |_| r.random_range(0.05..1.0));
        let mut label: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.6))).collect();
        if label.iter().all(|&v| v == 0) {
            label[0] = 1;
        }
        for delta in [0.15, r.random_range(0.0..1.0), 1.0] {
            let cfg = MatchConfig {
                delta,
                ..MatchConfig::default()
            };
            let tau = adaptive_threshold(&m, delta, ThresholdScope::PerClass).unwrap();
            let sep = separate(&m, &tau, &image, &label, &cfg).unwrap();
            if sep.b.iter().any(|&b| b * (1 - b.min(1)) != 0 || b > 1) {
                failures.push(format!("case {case}: b not binary"));
            }
            for c in (0..n).filter(|&c| sep.present[c]) {
                for y in 0..h {
                    for x in 0..w {
                        let fg = (0..3).any(|k| sep.x_fg[[c, y, x, k]] != 0.0);
                        let bg = (0..3).any(|k| sep.x_bg[[c, y, x, k]] != 0.0);
                        if fg && bg {
                            failures.push(format!("case {case}: class {c} pixel ({y},{x}) in both"));
                        }
                        if delta == 1.0 {
                            let max = (0..h)
                                .flat_map(|yy| (0..w).map(move |xx| (yy, xx)))
                                .map(|(yy, xx)| m[[yy, xx, c]])
                                .fold(f64::MIN, f64::max);
                            let is_max = m[[y, x, c]] == max;
                            if (sep.b[[y, x, c]] == 1) != is_max {
                                failures.push(format!("case {case}: δ=1 class {c} pixel ({y},{x})"));
                            }
                        }
                    }
                }
            }
        }
    }
    failures.truncate(3);
    let pass = failures.is_empty();
    outcome(
        pass,
        if pass {
            "100 random maps × 3 thresholds".into()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 7–10

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_k: 10,
        lr: DESK_LR,
        seed,
        ..TrainConfig::default()
    }
}

fn oracle_miou(manifest: &DatasetManifest, cfg: &TrainConfig) -> f64 {
    let records: Vec<_> = manifest.split(Split::Val).collect();
    [3e-3, 1e-2]
        .into_iter()
        .map(|lr| {
            let model = train_supervised(
                manifest,
                &SupervisedConfig {
                    channel_dims: cfg.channel_dims,
                    lr,
                    weight_decay: cfg.weight_decay,
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    seed: cfg.seed,
                    augment_flips: cfg.augment_flips,
                },
            )
            .expect("oracle trains");
            let masks: Vec<Mask> = records
                .iter()
                .map(|r| model.predict(&r.image, Some(&r.label)).expect("oracle predicts"))
                .collect();
            pbip::pipeline::score_masks(&records, &masks, &manifest.class_names, cfg.biou_radius)
                .expect("oracle scores")
                .miou
        })
        .fold(f64::MIN, f64::max)
}

fn criterion_7(manifest: &DatasetManifest, run: &PipelineResult, elapsed: f64) -> Outcome {
    let oracle = oracle_miou(manifest, &desk_config(0));
    let miou = run.metrics.miou;
    outcome(
        miou >= 0.70 && miou >= 0.85 * oracle && elapsed < 600.0,
        format!(
            "mIoU {miou:.4} vs oracle {oracle:.4} (ratio {:.3}), pipeline {elapsed:.1}s",
            miou / oracle
        ),
    )
}

fn criterion_8(manifest: &DatasetManifest) -> Outcome {
    let spec = AblationSpec {
        param: AblationParam::Modules,
        values: vec!["SIM+AT+FGS+BGS".into(), "SIM+AT+BGS".into(), "SIM+AT+FGS".into()],
        seeds: (0..5).collect(),
    };
    let table = run_ablation(&spec, &desk_config(0), manifest, Split::Val, None, 3).expect("ablation");
    let mean = |v: &str| table.row(v).and_then(|r| r.miou).map_or(f64::NAN, |m| m.mean);
    let (full, no_fgs, no_bgs) = (mean("SIM+AT+FGS+BGS"), mean("SIM+AT+BGS"), mean("SIM+AT+FGS"));
    let failed: usize = table.rows.iter().map(|r| r.failed).sum();
    outcome(
        failed == 0 && full > no_fgs && full > no_bgs,
        format!("mean mIoU over 5 seeds: full {full:.4}, without FGS {no_fgs:.4}, without BGS {no_bgs:.4}"),
    )
}

fn export_bytes(run: &PipelineResult, cfg: &TrainConfig, manifest: &DatasetManifest, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let model = run.outcome.checkpoint.model(pbip::pipeline::encoder_for(cfg)).expect("model");
    export_pseudo_masks(&model, &run.outcome.checkpoint.state.params, manifest, Split::Val, true, dir).expect("export");
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_9(manifest: &DatasetManifest, first: &PipelineResult, scratch: &Path) -> Outcome {
    let cfg = desk_config(0);
    let second = run_pipeline(manifest, &cfg, Split::Val, None).expect("second run");
    let a = export_bytes(first, &cfg, manifest, &scratch.join("a"));
    let b = export_bytes(&second, &cfg, manifest, &scratch.join("b"));
    let (la, lb) = (first.final_loss().unwrap(), second.final_loss().unwrap());
    let same = a == b;
    outcome(
        same && (la - lb).abs() <= 1e-6,
        format!("{} mask files identical: {same}; final losses {la:.9} / {lb:.9}", a.len()),
    )
}

fn criterion_10(run: &PipelineResult) -> Outcome {
    let report = bank_self_consistency(&run.bank, &run.prototypes.p).expect("zero-shot");
    outcome(
        report.accuracy >= 0.95,
        format!("accuracy {:.4} on {} bank members", report.accuracy, report.evaluated),
    )
}

fn main() {
    // Numeric arguments select criteria, e.g. `cargo test --test acceptance -- 4 5`.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut time = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let mut o = f();
        o.detail = format!("{} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        results.push((id, name, o));
    };
    time(1, "clustering oracle", &mut criterion_1);
    time(2, "similarity oracle", &mut criterion_2);
    time(3, "gradient suite", &mut criterion_3);
    time(4, "loss scalar goldens", &mut criterion_4);
    time(5, "metric oracle", &mut criterion_5);
    time(6, "separation invariants", &mut criterion_6);

    if !(7..=10).any(wanted) {
        return report(&results);
    }
    let scratch = tempfile::tempdir().expect("tempdir");
    let root = scratch.path().join("synthetic");
    generate_synthetic(&SyntheticSpec::default(), &root).expect("synthetic data");
    let manifest = load_manifest(&root, FormatHint::Auto).expect("manifest");
    let t = Instant::now();
    let run = run_pipeline(&manifest, &desk_config(0), Split::Val, None).expect("pipeline");
    let elapsed = t.elapsed().as_secs_f64();

    time(7, "end-to-end synthetic run", &mut || criterion_7(&manifest, &run, elapsed));
    time(8, "ablation direction", &mut || criterion_8(&manifest));
    time(9, "determinism", &mut || criterion_9(&manifest, &run, scratch.path()));
    time(10, "zero-shot self-consistency", &mut || criterion_10(&run));
    report(&results);
}

fn report(results: &[(usize, &str, Outcome)]) {
    let mut fatal = 0;
    for (id, name, o) in results {
        let known = KNOWN_UNMET.iter().find(|(k, _)| k == id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS".to_string(),
            (false, Some(_)) => "FAIL (known)".to_string(),
            (false, None) => {
                fatal += 1;
                "FAIL".to_string()
            }
        };
        println!("{tag} criterion {id} {name}: {}", o.detail);
        if let (false, Some((_, why))) = (o.pass, known) {
            println!("     note: {why}");
        }
    }
    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if fatal > 0 {
        std::process::exit(1);
    }
}
