//! Stage-1 optimisation, checkpoints, pseudo-mask export and the stage-2
//! trainer hook.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{short_hash, EncodedArray};
use crate::config::TrainConfig;
use crate::data::{self, DatasetManifest, Image, Mask, PatchRecord, Split};
use crate::encoders::{ParamStore, PrototypeEncoder};
use crate::error::{PbipError, Result};
use crate::model::{argmax_mask, LossTerms, PbipModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "last_good.json";
pub const LOG_FILE: &str = "train.log";
pub const MASK_MANIFEST: &str = "masks.tsv";

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Self::default()
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * p.data[i]);
            }
        }
    }
}

/// Mutable training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub best_val: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub terms: LossTerms,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.9}\t{:.9}\t{:.9}",
            self.step, self.terms.l_cls, self.terms.l_sim, self.terms.l_total
        )
    }
}

/// Mean total loss of every epoch in `log`.
pub fn epoch_means(log: &[StepLog]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in log {
        let e = sums.entry(s.epoch).or_default();
        e.0 += s.terms.l_total;
        e.1 += 1;
    }
    sums.values().map(|(s, c)| s / *c as f64).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: u32,
    step: u64,
    epoch: usize,
    config: TrainConfig,
    class_names: Vec<String>,
    encoder_id: String,
    encoder_fingerprint: String,
    prototypes: EncodedArray,
    prototype_provenance: String,
    best_val: Option<EncodedArray>,
    params: BTreeMap<String, EncodedArray>,
    adam_t: u64,
    adam_m: BTreeMap<String, EncodedArray>,
    adam_v: BTreeMap<String, EncodedArray>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub encoder_id: String,
    pub encoder_fingerprint: String,
    pub prototypes: Array3<f64>,
    pub prototype_provenance: String,
    pub state: TrainState,
}

fn encode_map(map: &BTreeMap<String, Vec<f64>>) -> BTreeMap<String, EncodedArray> {
    map.iter().map(|(k, v)| (k.clone(), EncodedArray::new(&[v.len()], v))).collect()
}

fn decode_map(map: &BTreeMap<String, EncodedArray>) -> Result<BTreeMap<String, Vec<f64>>> {
    map.iter().map(|(k, v)| Ok((k.clone(), v.decode()?))).collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, k, d) = self.prototypes.dim();
        let file = CheckpointFile {
            format: 1,
            step: self.state.step,
            epoch: self.state.epoch,
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            encoder_id: self.encoder_id.clone(),
            encoder_fingerprint: self.encoder_fingerprint.clone(),
            prototypes: EncodedArray::new(&[n, k, d], &self.prototypes.iter().copied().collect::<Vec<_>>()),
            prototype_provenance: self.prototype_provenance.clone(),
            best_val: self.state.best_val.map(|v| EncodedArray::new(&[1], &[v])),
            params: self
                .state
                .params
                .iter()
                .map(|(name, p)| (name.to_string(), EncodedArray::new(&p.shape, &p.data)))
                .collect(),
            adam_t: self.state.optimizer.t,
            adam_m: encode_map(&self.state.optimizer.m),
            adam_v: encode_map(&self.state.optimizer.v),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PbipError::io(dir, e))?;
        }
        let text = serde_json::to_string(&file)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| PbipError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| PbipError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PbipError::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != 1 {
            return Err(PbipError::Serde(format!("unsupported checkpoint format {}", file.format)));
        }
        let shape = &file.prototypes.shape;
        if shape.len() != 3 {
            return Err(PbipError::Serde("prototype array must be 3-d".into()));
        }
        let prototypes = Array3::from_shape_vec((shape[0], shape[1], shape[2]), file.prototypes.decode()?)
            .map_err(|e| PbipError::Serde(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, a) in &file.params {
            params.insert(name.clone(), &a.shape, a.decode()?);
        }
        let optimizer = AdamW {
            t: file.adam_t,
            m: decode_map(&file.adam_m)?,
            v: decode_map(&file.adam_v)?,
            ..AdamW::new()
        };
        Ok(Self {
            config: file.config,
            class_names: file.class_names,
            encoder_id: file.encoder_id,
            encoder_fingerprint: file.encoder_fingerprint,
            prototypes,
            prototype_provenance: file.prototype_provenance,
            state: TrainState {
                step: file.step,
                epoch: file.epoch,
                params,
                optimizer,
                best_val: file.best_val.map(|a| a.decode().map(|v| v[0])).transpose()?,
            },
        })
    }

    /// Rebuilds the network this checkpoint was trained with.
    pub fn model(&self, encoder: Arc<dyn PrototypeEncoder>) -> Result<PbipModel> {
        if encoder.id() != self.encoder_id {
            return Err(PbipError::Config(format!(
                "checkpoint was trained with encoder {}, got {}",
                self.encoder_id,
                encoder.id()
            )));
        }
        PbipModel::new(&self.config, self.prototypes.clone(), encoder)
    }
}

/// Where and how a training run writes its artefacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs instead of `cfg.epochs`.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

fn train_records(manifest: &DatasetManifest) -> Result<Vec<&PatchRecord>> {
    let records: Vec<&PatchRecord> = manifest.split(Split::Train).collect();
    if records.is_empty() {
        return Err(PbipError::NoRecords(manifest.root.join("train")));
    }
    Ok(records)
}

/// Random flips for one sample, fixed by `(seed, step, position)`.
fn augment(image: &Image, seed: u64, step: u64, position: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1_1b5);
    rng.set_stream(step << 16 | position as u64);
    let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
    data::flip(image, h, v)
}

fn fresh_checkpoint(
    manifest: &DatasetManifest,
    prototypes: &crate::bank::PrototypeSet,
    encoder: &dyn PrototypeEncoder,
    model: &PbipModel,
    cfg: &TrainConfig,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        class_names: manifest.class_names.clone(),
        encoder_id: encoder.id(),
        encoder_fingerprint: short_hash(&encoder.fingerprint()),
        prototypes: prototypes.p.clone(),
        prototype_provenance: prototypes.provenance.clone(),
        state: TrainState {
            step: 0,
            epoch: 0,
            params: model.init_params(cfg.seed),
            optimizer: AdamW::new(),
            best_val: None,
        },
    }
}

/// Runs stage-1 training, optionally resuming from `resume`.
pub fn train_stage1(
    manifest: &DatasetManifest,
    prototypes: &crate::bank::PrototypeSet,
    encoder: Arc<dyn PrototypeEncoder>,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prototypes.ensure_nonzero()?;
    if prototypes.n_classes() != manifest.n_classes() {
        return Err(PbipError::Config(format!(
            "bank has {} classes, dataset has {}",
            prototypes.n_classes(),
            manifest.n_classes()
        )));
    }
    let records = train_records(manifest)?;
    let fingerprint_before = encoder.fingerprint();
    let model = PbipModel::new(cfg, prototypes.p.clone(), encoder.clone())?;
    let mut ckpt = match resume {
        Some(c) => {
            if c.class_names != manifest.class_names || c.prototypes != prototypes.p {
                return Err(PbipError::Config("checkpoint does not match this dataset and bank".into()));
            }
            if c.encoder_fingerprint != short_hash(&fingerprint_before) {
                return Err(PbipError::Config("checkpoint was trained with a different encoder".into()));
            }
            Checkpoint { config: cfg.clone(), ..c }
        }
        None => fresh_checkpoint(manifest, prototypes, encoder.as_ref(), &model, cfg),
    };
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| PbipError::io(dir, e))?;
            cfg.write_lock(dir)?;
            let path = dir.join(LOG_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(ckpt.state.step > 0)
                .write(true)
                .truncate(ckpt.state.step == 0)
                .open(&path)
                .map_err(|e| PbipError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let last_epoch = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut log = Vec::new();
    for epoch in ckpt.state.epoch..last_epoch {
        for batch in data::epoch_batches(records.len(), cfg.batch_size, cfg.seed, epoch) {
            let step = ckpt.state.step + 1;
            let params = &ckpt.state.params;
            let results: Vec<Result<(LossTerms, BTreeMap<String, Vec<f64>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let r = records[i];
                    let image = if cfg.augment_flips {
                        augment(&r.image, cfg.seed, step, pos)
                    } else {
                        r.image.clone()
                    };
                    model.loss_and_grads(params, &image, &r.label)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut terms = LossTerms::default();
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in results {
                let (t, g) = r?;
                terms.accumulate(&t);
                for (name, gv) in g {
                    let acc = grads.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    for (a, b) in acc.iter_mut().zip(gv) {
                        *a += b * scale;
                    }
                }
            }
            let terms = terms.scaled(scale);
            let grads_finite = grads.values().flatten().all(|v| v.is_finite());
            if !terms.is_finite() || !grads_finite {
                if let Some(dir) = &opts.out_dir {
                    ckpt.save(&dir.join(LAST_GOOD_FILE))?;
                }
                return Err(PbipError::Diverged {
                    step: step as usize,
                    detail: format!(
                        "l_cls {} l_sim {} l_total {}{}",
                        terms.l_cls,
                        terms.l_sim,
                        terms.l_total,
                        if grads_finite { "" } else { ", non-finite gradient" }
                    ),
                });
            }
            ckpt.state.optimizer.step(&mut ckpt.state.params, &grads, cfg.lr, cfg.weight_decay);
            ckpt.state.step = step;
            let entry = StepLog { step, epoch, terms };
            log::debug!("{}", entry.line());
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", entry.line()).map_err(|e| PbipError::io(path.as_path(), e))?;
            }
            log.push(entry);
        }
        ckpt.state.epoch = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join(format!("epoch_{:03}.json", epoch + 1)))?;
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        }
        if let Some(last) = log.last() {
            log::info!("epoch {} done at step {}: l_total {:.5}", epoch + 1, last.step, last.terms.l_total);
        }
    }
    if encoder.fingerprint() != fingerprint_before {
        return Err(PbipError::Config("prototype encoder weights changed during training".into()));
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// Summary of an export run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub split: Split,
    pub count: usize,
    pub gated: bool,
    pub out_dir: PathBuf,
}

/// Pseudo-mask for one image: argmax of the aggregated activation map.
pub fn pseudo_mask(model: &PbipModel, params: &ParamStore, image: &Image, label: Option<&[u8]>) -> Result<Mask> {
    let stack = model.predict(params, image)?;
    argmax_mask(stack.aggregated.as_ref().expect("aggregated map"), label)
}

/// Writes the level heatmaps and the per-class FG/BG images of `record`.
pub fn dump_debug(model: &PbipModel, params: &ParamStore, record: &PatchRecord, dir: &Path) -> Result<()> {
    let stack = model.predict(params, &record.image)?;
    crate::simnet::dump_heatmaps(&stack, dir, &record.id)?;
    let m = stack.aggregated.as_ref().expect("aggregated map");
    let cfg = &model.matching;
    let tau = crate::matchnet::adaptive_threshold(m, cfg.delta, cfg.threshold_scope)?;
    let sep = crate::matchnet::separate(m, &tau, &record.image, &record.label, cfg)?;
    crate::matchnet::dump_regions(&sep, dir, &record.id)
}

/// Writes one 8-bit class-index PNG per record of `split` plus a
/// `masks.tsv` index.
pub fn export_pseudo_masks(
    model: &PbipModel,
    params: &ParamStore,
    manifest: &DatasetManifest,
    split: Split,
    gated: bool,
    out_dir: &Path,
) -> Result<ExportSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| PbipError::io(out_dir, e))?;
    let records: Vec<&PatchRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(PbipError::NoRecords(manifest.root.join(split.as_str())));
    }
    let rows: Vec<String> = records
        .par_iter()
        .map(|r| {
            let mask = pseudo_mask(model, params, &r.image, gated.then_some(r.label.as_slice()))?;
            let name = format!("{}.png", r.id);
            data::save_mask(&out_dir.join(&name), &mask)?;
            Ok(format!("{}\t{}\t{name}", r.id, data::format_label(&r.label)))
        })
        .collect::<Result<_>>()?;
    let index = out_dir.join(MASK_MANIFEST);
    let mut text = String::from("id\tlabel\tmask\n");
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(&index, text).map_err(|e| PbipError::io(&index, e))?;
    Ok(ExportSummary {
        split,
        count: records.len(),
        gated,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Full argument vector passed to an external stage-2 trainer.
pub fn stage2_args(command: &[String], masks: &Path, images: &Path, out: &Path) -> Result<Vec<String>> {
    if command.is_empty() {
        return Err(PbipError::Command("empty trainer command".into()));
    }
    let mut args = command.to_vec();
    for (flag, path) in [("--masks", masks), ("--images", images), ("--out", out)] {
        args.push(flag.to_string());
        args.push(path.display().to_string());
    }
    Ok(args)
}

/// Runs an external trainer as `command --masks <dir> --images <dir> --out <dir>`.
pub fn stage2_hook(command: &[String], masks: &Path, images: &Path, out: &Path) -> Result<()> {
    if !masks.is_dir() {
        return Err(PbipError::Command(format!("mask directory {} does not exist", masks.display())));
    }
    let args = stage2_args(command, masks, images, out)?;
    let status = Command::new(&args[0])
        .args(&args[1..])
        .status()
        .map_err(|e| PbipError::Command(format!("cannot start {}: {e}", args[0])))?;
    if !status.success() {
        return Err(PbipError::Command(format!("{} exited with {status}", args[0])));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", &[2], vec![1.0, -1.0]);
        let grads = BTreeMap::from([("w".to_string(), vec![0.5, -2.0])]);
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0.1, 0.0);
        let w = &params.get("w").unwrap().data;
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = ParamStore::new();
        params.insert("w", &[1], vec![2.0]);
        let grads = BTreeMap::from([("w".to_string(), vec![0.0])]);
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0.1, 0.5);
        assert!((params.get("w").unwrap().data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn hook_arguments() {
        let cmd = vec!["trainer".to_string(), "--fast".to_string()];
        let args = stage2_args(&cmd, Path::new("m"), Path::new("i"), Path::new("o")).unwrap();
        assert_eq!(args.join(" "), "trainer --fast --masks m --images i --out o");
        assert!(stage2_args(&[], Path::new("m"), Path::new("i"), Path::new("o")).is_err());
    }

    #[test]
    fn hook_checks_mask_dir_and_exit_status() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let ok = ["true".to_string()];
        assert!(stage2_hook(&ok, &missing, dir.path(), dir.path()).is_err());
        assert!(stage2_hook(&ok, dir.path(), dir.path(), dir.path()).is_ok());
        let fail = ["false".to_string()];
        assert!(matches!(
            stage2_hook(&fail, dir.path(), dir.path(), dir.path()),
            Err(PbipError::Command(_))
        ));
    }

    #[test]
    fn epoch_means_group_by_epoch() {
        let mk = |step, epoch, v| StepLog {
            step,
            epoch,
            terms: LossTerms {
                l_total: v,
                ..LossTerms::default()
            },
        };
        let log = [mk(1, 0, 1.0), mk(2, 0, 3.0), mk(3, 1, 0.5)];
        assert_eq!(epoch_means(&log), vec![2.0, 0.5]);
    }
}
