//! Fully supervised reference segmenter: the same backbone with per-level
//! `1×1` heads trained by pixel cross-entropy on dense masks.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{self, DatasetManifest, Image, Mask, PatchRecord, Split};
use crate::encoders::{image_leaf, HierarchicalBackbone, ParamStore, ToyBackbone};
use crate::error::{PbipError, Result};
use crate::matchnet;
use crate::model::argmax_mask;
use crate::simnet::LinearMaskHead;
use crate::train::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedConfig {
    pub channel_dims: [usize; 3],
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment_flips: bool,
}

pub struct SupervisedModel {
    pub backbone: ToyBackbone,
    pub head: LinearMaskHead,
    pub params: ParamStore,
    pub losses: Vec<f64>,
}

/// Dense target for a training record: its mask, or a constant map for a
/// single-class patch. Multi-class patches without masks have none.
fn dense_target(r: &PatchRecord) -> Option<Mask> {
    if let Some(m) = &r.gt_mask {
        return Some(m.clone());
    }
    data::is_single_class(r).then(|| {
        let c = r.classes().next().expect("single class") as u8;
        Mask::from_elem((r.height(), r.width()), c)
    })
}

fn logits(
    backbone: &ToyBackbone,
    head: &LinearMaskHead,
    tape: &mut Tape,
    params: &crate::encoders::BoundParams,
    image: &Image,
) -> Result<crate::autodiff::Var> {
    let (h, w, _) = image.dim();
    let x = image_leaf(tape, image);
    let feats = backbone.forward_var(tape, params, x, h, w)?;
    let levels: Vec<_> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| (head.forward_var(tape, params, i, f), f.height, f.width))
        .collect();
    Ok(matchnet::aggregate_var(tape, &levels, h, w))
}

pub fn train_supervised(manifest: &DatasetManifest, cfg: &SupervisedConfig) -> Result<SupervisedModel> {
    let samples: Vec<(&PatchRecord, Mask)> = manifest
        .split(Split::Train)
        .filter_map(|r| dense_target(r).map(|m| (r, m)))
        .collect();
    if samples.is_empty() {
        return Err(PbipError::NoRecords(manifest.root.join("train")));
    }
    let n = manifest.n_classes();
    let backbone = ToyBackbone::new(cfg.channel_dims)?;
    let head = LinearMaskHead {
        channel_dims: cfg.channel_dims,
        n_classes: n,
    };
    let mut params = ParamStore::new();
    backbone.init_params(&mut params, cfg.seed);
    head.init_params(&mut params, cfg.seed);
    let mut opt = AdamW::new();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        for batch in data::epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
            let results: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let (r, mask) = &samples[i];
                    let flip = cfg.augment_flips && (epoch + pos + i) % 2 == 1;
                    let (image, mask) = if flip {
                        let mut m = mask.clone();
                        m.invert_axis(ndarray::Axis(1));
                        (data::flip(&r.image, true, false), m.as_standard_layout().to_owned())
                    } else {
                        (r.image.clone(), mask.clone())
                    };
                    let mut tape = Tape::new();
                    let bound = params.bind(&mut tape);
                    let z = logits(&backbone, &head, &mut tape, &bound, &image)?;
                    let labels: Vec<Option<usize>> = mask.iter().map(|&v| ((v as usize) < n).then_some(v as usize)).collect();
                    let loss = tape.pixel_cross_entropy(z, &labels);
                    let value = tape.scalar(loss);
                    tape.backward(loss);
                    Ok((value, bound.grads(&tape)))
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l * scale;
                for (name, gv) in g {
                    let acc = grads.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    for (a, b) in acc.iter_mut().zip(gv) {
                        *a += b * scale;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(PbipError::Diverged {
                    step: losses.len() + 1,
                    detail: format!("supervised loss {loss}"),
                });
            }
            opt.step(&mut params, &grads, cfg.lr, cfg.weight_decay);
            losses.push(loss);
        }
    }
    Ok(SupervisedModel {
        backbone,
        head,
        params,
        losses,
    })
}

impl SupervisedModel {
    pub fn predict(&self, image: &Image, label: Option<&[u8]>) -> Result<Mask> {
        let (h, w, _) = image.dim();
        let n = self.head.n_classes;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let z = logits(&self.backbone, &self.head, &mut tape, &bound, image)?;
        let m = ndarray::Array3::from_shape_vec((h, w, n), tape.value(z).to_vec()).expect("logit map");
        argmax_mask(&m, label)
    }
}
