//! End-to-end runs: bank construction, stage-1 training, pseudo-masks and
//! evaluation against ground truth.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bank::{aggregate_prototypes, build_bank, FeatureCache, ImageBank, PrototypeSet};
use crate::config::TrainConfig;
use crate::data::{DatasetManifest, Mask, PatchRecord, Split};
use crate::encoders::{PrototypeEncoder, ToyPrototypeEncoder};
use crate::error::{PbipError, Result};
use crate::metrics::{evaluate_pairs, RunMetrics};
use crate::train::{pseudo_mask, train_stage1, TrainOptions, TrainOutcome};

/// The frozen encoder a config asks for.
pub fn encoder_for(cfg: &TrainConfig) -> Arc<dyn PrototypeEncoder> {
    Arc::new(ToyPrototypeEncoder::with_dim(cfg.encoder_seed, cfg.embed_dim))
}

pub struct PipelineResult {
    pub bank: ImageBank,
    pub prototypes: PrototypeSet,
    pub outcome: TrainOutcome,
    /// `(id, mask)` for every record of the evaluated split, in id order.
    pub masks: Vec<(String, Mask)>,
    pub metrics: RunMetrics,
}

impl PipelineResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.outcome.log.last().map(|s| s.terms.l_total)
    }
}

/// Scores predicted masks against the ground truth of `records`.
pub fn score_masks(records: &[&PatchRecord], masks: &[Mask], class_names: &[String], radius: usize) -> Result<RunMetrics> {
    let pairs: Vec<(Mask, Mask)> = records
        .iter()
        .zip(masks)
        .map(|(r, m)| {
            let gt = r.gt_mask.clone().ok_or_else(|| PbipError::Record {
                path: r.path.clone(),
                reason: "record has no ground-truth mask".into(),
            })?;
            Ok((m.clone(), gt))
        })
        .collect::<Result<_>>()?;
    let (conf, bnd) = evaluate_pairs(&pairs, class_names.len(), radius)?;
    RunMetrics::from_accumulators(class_names, &conf, &bnd)
}

/// Builds the bank, trains, and scores pseudo-masks on `eval_split`.
pub fn run_pipeline(manifest: &DatasetManifest, cfg: &TrainConfig, eval_split: Split, out_dir: Option<&Path>) -> Result<PipelineResult> {
    cfg.validate()?;
    let encoder = encoder_for(cfg);
    let bank = build_bank(manifest, encoder.as_ref(), &cfg.bank_config(), &FeatureCache::new())?;
    let prototypes = aggregate_prototypes(&bank)?;
    if let Some(dir) = out_dir {
        bank.save(&dir.join("bank"))?;
    }
    let opts = TrainOptions {
        out_dir: out_dir.map(|d| d.join("train")),
        stop_after: None,
    };
    let outcome = train_stage1(manifest, &prototypes, encoder.clone(), cfg, None, &opts)?;
    let model = outcome.checkpoint.model(encoder)?;
    let records: Vec<&PatchRecord> = manifest.split(eval_split).collect();
    if records.is_empty() {
        return Err(PbipError::NoRecords(manifest.root.join(eval_split.as_str())));
    }
    let params = &outcome.checkpoint.state.params;
    let masks: Vec<Mask> = records
        .par_iter()
        .map(|r| pseudo_mask(&model, params, &r.image, cfg.label_gated_export.then_some(r.label.as_slice())))
        .collect::<Result<_>>()?;
    let metrics = score_masks(&records, &masks, &manifest.class_names, cfg.biou_radius)?;
    Ok(PipelineResult {
        bank,
        prototypes,
        outcome,
        masks: records.iter().map(|r| r.id.clone()).zip(masks).collect(),
        metrics,
    })
}
