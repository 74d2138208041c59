//! Image bank construction.
//!
//! Single-class, mostly-tissue training patches are grouped by class, each
//! group is split into `K` subclasses by spherical k-means under the cosine
//! distance, and the `N_K` members nearest each subclass centre are kept.
//! Prototype features are the per-subclass means of the kept members.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use log::warn;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_f64s, encode_f64s, short_hash, EncodedArray};
use crate::data::{is_single_class, white_fraction, DatasetManifest, Split, DEFAULT_WHITE_LEVEL, DEFAULT_WHITE_LIMIT};
use crate::encoders::PrototypeEncoder;
use crate::error::{PbipError, Result};

const NORM_EPS: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PbipError::Shape(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(PbipError::Domain("cosine distance of a zero-norm vector".into()));
    }
    Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub n_init: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// Unit-norm centres, `K × d`.
    pub centers: Array2<f64>,
    /// Sum over points of the cosine distance to the assigned centre.
    pub objective: f64,
    /// Objective after every centre update of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Cosine k-means with default options (100 iterations, 10 restarts).
pub fn kmeans_cosine(features: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_cosine_with(features, &KMeansOptions::new(k, seed))
}

pub fn kmeans_cosine_with(features: &Array2<f64>, opts: &KMeansOptions) -> Result<KMeansResult> {
    let (m, d) = features.dim();
    if opts.k == 0 {
        return Err(PbipError::Config("K must be at least 1".into()));
    }
    if m < opts.k {
        return Err(PbipError::TooFewPoints { m, k: opts.k });
    }
    let mut unit = Vec::with_capacity(m);
    for (i, row) in features.outer_iter().enumerate() {
        let row: Vec<f64> = row.to_vec();
        let n = norm(&row);
        if n <= NORM_EPS || !n.is_finite() {
            return Err(PbipError::Domain(format!("feature row {i} has zero or non-finite norm")));
        }
        unit.push(row.iter().map(|v| v / n).collect::<Vec<_>>());
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..opts.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(restart as u64);
        let run = lloyd(&unit, d, opts.k, opts.max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective - 1e-12) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn dist_unit(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let dd = dist_unit(point, center);
        if dd < best.1 {
            best = (c, dd);
        }
    }
    best
}

fn plus_plus_init(unit: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = unit.len();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut min_d: Vec<f64> = unit.iter().map(|p| dist_unit(p, &unit[chosen[0]])).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = min_d.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total <= 0.0 {
            // every remaining point coincides with a centre
            (0..m).find(|i| !chosen.contains(i)).expect("m >= k")
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, p) in unit.iter().enumerate() {
            min_d[i] = min_d[i].min(dist_unit(p, &unit[next]));
        }
    }
    chosen.into_iter().map(|i| unit[i].clone()).collect()
}

/// Recomputes centres as normalised member means. An empty cluster first
/// takes the point farthest from its current centre, drawn from clusters that
/// have members to spare.
fn update_centers(unit: &[Vec<f64>], d: usize, assign: &mut [usize], centers: &mut [Vec<f64>]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = (0..k).find(|&c| counts[c] == 0) else {
            break;
        };
        let donor = (0..unit.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                dist_unit(&unit[a], &centers[assign[a]])
                    .total_cmp(&dist_unit(&unit[b], &centers[assign[b]]))
                    .then(b.cmp(&a))
            })
            .expect("m >= k guarantees a donor");
        assign[donor] = empty;
        centers[empty] = unit[donor].clone();
    }
    for (c, center) in centers.iter_mut().enumerate() {
        let mut mean = vec![0.0; d];
        let mut first = None;
        for (i, _) in assign.iter().enumerate().filter(|(_, &a)| a == c) {
            first.get_or_insert(i);
            for (a, v) in mean.iter_mut().zip(&unit[i]) {
                *a += v;
            }
        }
        let n = norm(&mean);
        *center = if n > NORM_EPS {
            mean.iter().map(|v| v / n).collect()
        } else {
            unit[first.expect("non-empty cluster")].clone()
        };
    }
}

fn objective(unit: &[Vec<f64>], assign: &[usize], centers: &[Vec<f64>]) -> f64 {
    unit.iter().zip(assign).map(|(p, &a)| dist_unit(p, &centers[a])).sum()
}

fn lloyd(unit: &[Vec<f64>], d: usize, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let mut centers = plus_plus_init(unit, k, rng);
    let mut assign: Vec<usize> = unit.iter().map(|p| nearest(p, &centers).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        update_centers(unit, d, &mut assign, &mut centers);
        history.push(objective(unit, &assign, &centers));
        let next: Vec<usize> = unit.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assign || iterations >= max_iter {
            break;
        }
        assign = next;
    }
    let objective = *history.last().expect("one iteration");
    KMeansResult {
        assignments: assign,
        centers: Array2::from_shape_vec((k, d), centers.concat()).expect("centres"),
        objective,
        history,
        iterations,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub k: usize,
    pub n_k: usize,
    pub white_level: f32,
    pub white_limit: f32,
    pub seed: u64,
    pub max_iter: usize,
    pub n_init: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n_k: 100,
            white_level: DEFAULT_WHITE_LEVEL,
            white_limit: DEFAULT_WHITE_LIMIT,
            seed: 0,
            max_iter: 100,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub id: String,
    pub feature: Vec<f64>,
    /// Cosine distance to the subclass centre.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBank {
    pub class_names: Vec<String>,
    pub encoder_id: String,
    pub embed_dim: usize,
    pub config: BankConfig,
    /// `entries[n][k]` holds the selected patches of subclass `k` of class
    /// `n`, nearest first.
    pub entries: Vec<Vec<Vec<BankEntry>>>,
    /// `N × K × d` unit-norm cluster centres.
    pub centers: Array3<f64>,
    /// Size of each full cluster before selection.
    pub cluster_sizes: Vec<Vec<usize>>,
}

/// Encoded features keyed by `(encoder id, patch id)`.
#[derive(Default)]
pub struct FeatureCache {
    inner: Mutex<HashMap<(String, String), Vec<f64>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_encode(&self, encoder: &dyn PrototypeEncoder, id: &str, encode: impl FnOnce() -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let key = (encoder.id(), id.to_string());
        if let Some(v) = self.inner.lock().expect("feature cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let v = encode()?;
        self.inner.lock().expect("feature cache poisoned").insert(key, v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("feature cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices of training records eligible for class `n`'s bank.
pub fn eligible_records(manifest: &DatasetManifest, class: usize, cfg: &BankConfig) -> Vec<usize> {
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.split == Split::Train
                && is_single_class(r)
                && r.label[class] != 0
                && white_fraction(&r.image, cfg.white_level) <= cfg.white_limit
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn build_bank(manifest: &DatasetManifest, encoder: &dyn PrototypeEncoder, cfg: &BankConfig, cache: &FeatureCache) -> Result<ImageBank> {
    if cfg.n_k == 0 {
        return Err(PbipError::Config("N_K must be at least 1".into()));
    }
    let n = manifest.n_classes();
    let per_class: Vec<Vec<usize>> = (0..n).map(|c| eligible_records(manifest, c, cfg)).collect();
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(PbipError::EmptyClass(manifest.class_names[c].clone()));
    }
    let d = encoder.embed_dim();
    let classes: Vec<(Vec<Vec<BankEntry>>, Vec<Vec<f64>>, Vec<usize>)> = per_class
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let feats: Vec<Vec<f64>> = idx
                .par_iter()
                .map(|&i| {
                    let r = &manifest.records[i];
                    cache.get_or_encode(encoder, &r.id, || encoder.encode(&r.image))
                })
                .collect::<Result<_>>()?;
            let matrix = Array2::from_shape_vec((feats.len(), d), feats.concat()).map_err(|e| PbipError::Shape(e.to_string()))?;
            let opts = KMeansOptions {
                k: cfg.k,
                seed: cfg.seed.wrapping_add((c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                max_iter: cfg.max_iter,
                n_init: cfg.n_init,
            };
            let km = kmeans_cosine_with(&matrix, &opts)?;
            let mut subclasses = Vec::with_capacity(cfg.k);
            let mut sizes = Vec::with_capacity(cfg.k);
            for k in 0..cfg.k {
                let center: Vec<f64> = km.centers.row(k).to_vec();
                let mut members: Vec<BankEntry> = km
                    .assignments
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a == k)
                    .map(|(j, _)| {
                        let r = &manifest.records[idx[j]];
                        Ok(BankEntry {
                            id: r.id.clone(),
                            distance: cosine_distance(&feats[j], &center)?,
                            feature: feats[j].clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                members.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
                sizes.push(members.len());
                if members.len() < cfg.n_k {
                    warn!(
                        "class '{}' subclass {k} has {} members, fewer than N_K = {}",
                        manifest.class_names[c],
                        members.len(),
                        cfg.n_k
                    );
                }
                members.truncate(cfg.n_k);
                subclasses.push(members);
            }
            let centers = km.centers.outer_iter().map(|r| r.to_vec()).collect();
            Ok((subclasses, centers, sizes))
        })
        .collect::<Result<_>>()?;

    let mut centers = Array3::zeros((n, cfg.k, d));
    let mut entries = Vec::with_capacity(n);
    let mut cluster_sizes = Vec::with_capacity(n);
    for (c, (subs, cents, sizes)) in classes.into_iter().enumerate() {
        for (k, row) in cents.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                centers[[c, k, j]] = *v;
            }
        }
        entries.push(subs);
        cluster_sizes.push(sizes);
    }
    Ok(ImageBank {
        class_names: manifest.class_names.clone(),
        encoder_id: encoder.id(),
        embed_dim: d,
        config: *cfg,
        entries,
        centers,
        cluster_sizes,
    })
}

#[derive(Serialize, Deserialize)]
struct SubclassFile {
    ids: Vec<String>,
    distances: String,
    cluster_size: usize,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    version: u32,
    encoder_id: String,
    embed_dim: usize,
    class_names: Vec<String>,
    config: BankConfig,
    subclasses: Vec<Vec<SubclassFile>>,
    centers: EncodedArray,
}

pub const BANK_FILE: &str = "bank.json";
pub const FEATURES_FILE: &str = "features.json";

impl ImageBank {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn len(&self) -> usize {
        self.entries.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of the configuration, encoder and membership.
    pub fn config_hash(&self) -> String {
        let ids: Vec<Vec<Vec<&str>>> = self
            .entries
            .iter()
            .map(|c| c.iter().map(|s| s.iter().map(|e| e.id.as_str()).collect()).collect())
            .collect();
        let doc = serde_json::json!({
            "config": self.config,
            "encoder": self.encoder_id,
            "classes": self.class_names,
            "ids": ids,
        });
        short_hash(doc.to_string().as_bytes())
    }

    /// Writes `bank.json` and `features.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PbipError::io(dir, e))?;
        let (n, k, d) = self.centers.dim();
        let file = BankFile {
            version: 1,
            encoder_id: self.encoder_id.clone(),
            embed_dim: self.embed_dim,
            class_names: self.class_names.clone(),
            config: self.config,
            subclasses: self
                .entries
                .iter()
                .zip(&self.cluster_sizes)
                .map(|(subs, sizes)| {
                    subs.iter()
                        .zip(sizes)
                        .map(|(s, &size)| SubclassFile {
                            ids: s.iter().map(|e| e.id.clone()).collect(),
                            distances: encode_f64s(&s.iter().map(|e| e.distance).collect::<Vec<_>>()),
                            cluster_size: size,
                        })
                        .collect()
                })
                .collect(),
            centers: EncodedArray::new(&[n, k, d], self.centers.as_standard_layout().as_slice().expect("contiguous")),
        };
        let features: BTreeMap<&str, String> = self
            .entries
            .iter()
            .flatten()
            .flatten()
            .map(|e| (e.id.as_str(), encode_f64s(&e.feature)))
            .collect();
        let bank_path = dir.join(BANK_FILE);
        fs::write(&bank_path, serde_json::to_string_pretty(&file)?).map_err(|e| PbipError::io(&bank_path, e))?;
        let feat_path = dir.join(FEATURES_FILE);
        fs::write(&feat_path, serde_json::to_string_pretty(&features)?).map_err(|e| PbipError::io(&feat_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bank_path = dir.join(BANK_FILE);
        let text = fs::read_to_string(&bank_path).map_err(|e| PbipError::io(&bank_path, e))?;
        let file: BankFile = serde_json::from_str(&text)?;
        let feat_path = dir.join(FEATURES_FILE);
        let text = fs::read_to_string(&feat_path).map_err(|e| PbipError::io(&feat_path, e))?;
        let features: BTreeMap<String, String> = serde_json::from_str(&text)?;
        let dims = file.centers.shape.clone();
        if dims.len() != 3 {
            return Err(PbipError::Serde("bank centres must be 3-D".into()));
        }
        let centers =
            Array3::from_shape_vec((dims[0], dims[1], dims[2]), file.centers.decode()?).map_err(|e| PbipError::Serde(e.to_string()))?;
        let mut entries = Vec::new();
        let mut cluster_sizes = Vec::new();
        for subs in file.subclasses {
            let mut class_entries = Vec::new();
            let mut sizes = Vec::new();
            for s in subs {
                let distances = decode_f64s(&s.distances)?;
                if distances.len() != s.ids.len() {
                    return Err(PbipError::Serde("bank distances do not match member ids".into()));
                }
                let members = s
                    .ids
                    .into_iter()
                    .zip(distances)
                    .map(|(id, distance)| {
                        let feature = features
                            .get(&id)
                            .ok_or_else(|| PbipError::Serde(format!("no cached feature for '{id}'")))
                            .and_then(|f| decode_f64s(f))?;
                        Ok(BankEntry { id, feature, distance })
                    })
                    .collect::<Result<Vec<_>>>()?;
                class_entries.push(members);
                sizes.push(s.cluster_size);
            }
            entries.push(class_entries);
            cluster_sizes.push(sizes);
        }
        Ok(Self {
            class_names: file.class_names,
            encoder_id: file.encoder_id,
            embed_dim: file.embed_dim,
            config: file.config,
            entries,
            centers,
            cluster_sizes,
        })
    }
}

/// Mean bank features per subclass.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `N × K × d`.
    pub p: Array3<f64>,
    pub provenance: String,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.p.dim().0
    }

    pub fn k(&self) -> usize {
        self.p.dim().1
    }

    pub fn dim(&self) -> usize {
        self.p.dim().2
    }

    /// Rejects prototypes whose norm vanishes, which cosine scores cannot use.
    pub fn ensure_nonzero(&self) -> Result<()> {
        let (n, k, _) = self.p.dim();
        for a in 0..n {
            for b in 0..k {
                let v = self.p.slice(ndarray::s![a, b, ..]);
                if v.iter().map(|x| x * x).sum::<f64>().sqrt() <= NORM_EPS {
                    return Err(PbipError::Domain(format!("prototype ({a}, {b}) has zero norm")));
                }
            }
        }
        Ok(())
    }
}

pub fn aggregate_prototypes(bank: &ImageBank) -> Result<PrototypeSet> {
    let n = bank.entries.len();
    let k = bank.entries.first().map_or(0, Vec::len);
    let d = bank.embed_dim;
    let mut p = Array3::zeros((n, k, d));
    for (a, subs) in bank.entries.iter().enumerate() {
        if subs.len() != k {
            return Err(PbipError::Shape(format!("class {a} has {} subclasses, expected {k}", subs.len())));
        }
        for (b, members) in subs.iter().enumerate() {
            if members.is_empty() {
                return Err(PbipError::Domain(format!("subclass ({a}, {b}) is empty")));
            }
            for e in members {
                for (j, v) in e.feature.iter().enumerate() {
                    p[[a, b, j]] += v;
                }
            }
            let count = members.len() as f64;
            p.slice_mut(ndarray::s![a, b, ..]).mapv_inplace(|v| v / count);
        }
    }
    Ok(PrototypeSet {
        p,
        provenance: bank.config_hash(),
    })
}
