//! The per-image stage-1 network: backbone features, prototype-similarity
//! masks, classification loss, region separation and matching losses.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::autodiff::{Tape, Var};
use crate::config::{MaskHead, TrainConfig};
use crate::data::{Image, Mask};
use crate::encoders::{image_leaf, BoundParams, HierarchicalBackbone, ParamStore, PrototypeEncoder, PrototypeProjector, ToyBackbone};
use crate::error::{PbipError, Result};
use crate::matchnet::{self, MatchConfig};
use crate::simnet::{self, ClsLossConfig, LinearMaskHead, PseudoMaskStack};

/// Scalar loss values from one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_cls: f64,
    pub fgs: f64,
    pub bgs: f64,
    pub l_sim: f64,
    pub l_total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.fgs, self.bgs, self.l_sim, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise sum, used to average over a batch.
    pub fn accumulate(&mut self, other: &LossTerms) {
        self.l_cls += other.l_cls;
        self.fgs += other.fgs;
        self.bgs += other.bgs;
        self.l_sim += other.l_sim;
        self.l_total += other.l_total;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            l_cls: self.l_cls * s,
            fgs: self.fgs * s,
            bgs: self.bgs * s,
            l_sim: self.l_sim * s,
            l_total: self.l_total * s,
        }
    }
}

/// Loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cls: Var,
    pub fgs: Option<Var>,
    pub bgs: Option<Var>,
    pub l_sim: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossTerms {
            l_cls: tape.scalar(self.l_cls),
            fgs: get(self.fgs),
            bgs: get(self.bgs),
            l_sim: get(self.l_sim),
            l_total: tape.scalar(self.total),
        }
    }
}

/// `α · l_cls + β · l_sim`.
pub fn total_loss(l_cls: f64, l_sim: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !l_cls.is_finite() || !l_sim.is_finite() {
        return Err(PbipError::Domain(format!("non-finite loss terms: l_cls {l_cls}, l_sim {l_sim}")));
    }
    Ok(alpha * l_cls + beta * l_sim)
}

/// Network definition plus the frozen pieces it is evaluated against.
#[derive(Clone)]
pub struct PbipModel {
    pub backbone: ToyBackbone,
    pub projector: PrototypeProjector,
    pub head: Option<LinearMaskHead>,
    /// Raw `N × K × d` prototype features.
    pub prototypes: Arc<Array3<f64>>,
    pub encoder: Arc<dyn PrototypeEncoder>,
    pub cls: ClsLossConfig,
    pub matching: MatchConfig,
    pub alpha: f64,
    pub beta: f64,
}

impl PbipModel {
    pub fn new(cfg: &TrainConfig, prototypes: Array3<f64>, encoder: Arc<dyn PrototypeEncoder>) -> Result<Self> {
        cfg.validate()?;
        let (n, k, d) = prototypes.dim();
        if d != encoder.embed_dim() {
            return Err(PbipError::Config(format!(
                "prototype dim {d} does not match encoder dim {}",
                encoder.embed_dim()
            )));
        }
        if n == 0 || k == 0 {
            return Err(PbipError::Config("prototype set is empty".into()));
        }
        let backbone = ToyBackbone::new(cfg.channel_dims)?;
        let head = match cfg.mask_head {
            MaskHead::Similarity => None,
            MaskHead::Conv1x1 => Some(LinearMaskHead {
                channel_dims: cfg.channel_dims,
                n_classes: n,
            }),
        };
        Ok(Self {
            backbone,
            projector: PrototypeProjector::new(d, cfg.channel_dims),
            head,
            prototypes: Arc::new(prototypes),
            encoder,
            cls: cfg.cls_config(),
            matching: cfg.match_config(),
            alpha: cfg.alpha,
            beta: cfg.beta,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.dim().0
    }

    pub fn k(&self) -> usize {
        self.prototypes.dim().1
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.backbone.init_params(&mut store, seed);
        self.projector.init_params(&mut store, seed);
        if let Some(head) = &self.head {
            head.init_params(&mut store, seed);
        }
        store
    }

    /// Projected prototypes, one `(N·K) × C_i` node per level.
    fn projected_var(&self, tape: &mut Tape, params: &BoundParams) -> Result<[Var; 3]> {
        let (n, k, d) = self.prototypes.dim();
        let p = tape.leaf(self.prototypes.iter().copied().collect(), &[n * k, d]);
        self.projector.project_var(tape, params, p)
    }

    /// Level masks as `(var, h_i, w_i)` plus the projected prototypes.
    fn masks_var(&self, tape: &mut Tape, params: &BoundParams, image: &Image) -> Result<(Vec<(Var, usize, usize)>, [Var; 3])> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(PbipError::Shape(format!("expected a 3-channel image, got {c}")));
        }
        let x = image_leaf(tape, image);
        let feats = self.backbone.forward_var(tape, params, x, h, w)?;
        let protos = self.projected_var(tape, params)?;
        let mut levels = Vec::with_capacity(3);
        for (i, f) in feats.iter().enumerate() {
            let m = match &self.head {
                None => simnet::similarity_var(tape, f, protos[i], self.k())?,
                Some(head) => head.forward_var(tape, params, i, f),
            };
            levels.push((m, f.height, f.width));
        }
        Ok((levels, protos))
    }

    /// Builds the full training objective for one labelled image.
    pub fn loss_var(&self, tape: &mut Tape, params: &BoundParams, image: &Image, label: &[u8]) -> Result<LossVars> {
        let n = self.n_classes();
        if label.len() != n {
            return Err(PbipError::Shape(format!(
                "label has {} entries, model has {n} classes",
                label.len()
            )));
        }
        if label.iter().all(|&v| v == 0) {
            return Err(PbipError::EmptyLabel);
        }
        let (h, w, _) = image.dim();
        let (levels, protos) = self.masks_var(tape, params, image)?;
        let pooled: Vec<Var> = levels
            .iter()
            .map(|&(m, _, _)| {
                let mean = tape.mean_rows(m);
                tape.reshape(mean, &[1, n])
            })
            .collect();
        let yhat = tape.stack_rows(&pooled);
        let y: Vec<f64> = label.iter().map(|&v| f64::from(v)).collect();
        let l_cls = simnet::classification_loss_var(tape, yhat, &y, &self.cls)?;
        let weighted_cls = tape.affine(l_cls, self.alpha, 0.0);
        if self.beta == 0.0 {
            return Ok(LossVars {
                l_cls,
                fgs: None,
                bgs: None,
                l_sim: None,
                total: weighted_cls,
            });
        }
        let mp = matchnet::aggregate_var(tape, &levels, h, w);
        let regions = matchnet::region_images_var(tape, mp, image, label, &self.matching)?;
        let (fgs, bgs) = matchnet::similarity_terms_var(
            tape,
            &regions,
            self.encoder.as_ref(),
            &self.projector,
            params,
            &protos,
            self.k(),
            h,
            w,
            &self.matching,
        )?;
        let a = tape.affine(fgs, self.matching.theta1, 0.0);
        let b = tape.affine(bgs, self.matching.theta2, 0.0);
        let l_sim = tape.add(a, b);
        let weighted_sim = tape.affine(l_sim, self.beta, 0.0);
        let total = tape.add(weighted_cls, weighted_sim);
        Ok(LossVars {
            l_cls,
            fgs: Some(fgs),
            bgs: Some(bgs),
            l_sim: Some(l_sim),
            total,
        })
    }

    /// Loss values and parameter gradients of the total objective.
    pub fn loss_and_grads(&self, params: &ParamStore, image: &Image, label: &[u8]) -> Result<(LossTerms, BTreeMap<String, Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars = self.loss_var(&mut tape, &bound, image, label)?;
        let terms = vars.terms(&tape);
        tape.backward(vars.total);
        Ok((terms, bound.grads(&tape)))
    }

    /// Level masks and their upsampled sum for one image.
    pub fn predict(&self, params: &ParamStore, image: &Image) -> Result<PseudoMaskStack> {
        let (h, w, _) = image.dim();
        let n = self.n_classes();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (levels, _) = self.masks_var(&mut tape, &bound, image)?;
        let mp = matchnet::aggregate_var(&mut tape, &levels, h, w);
        let arrays = levels
            .iter()
            .map(|&(v, lh, lw)| Array3::from_shape_vec((lh, lw, n), tape.value(v).to_vec()).expect("level mask"))
            .collect();
        Ok(PseudoMaskStack {
            levels: arrays,
            aggregated: Some(Array3::from_shape_vec((h, w, n), tape.value(mp).to_vec()).expect("aggregate")),
            binary: None,
        })
    }
}

/// Per-pixel argmax over classes; with `label` only the listed classes
/// compete. Ties go to the lower index.
pub fn argmax_mask(m: &Array3<f64>, label: Option<&[u8]>) -> Result<Mask> {
    let (h, w, n) = m.dim();
    if n == 0 || n > u8::MAX as usize {
        return Err(PbipError::Shape(format!("cannot encode {n} classes in an 8-bit mask")));
    }
    if let Some(l) = label {
        if l.len() != n {
            return Err(PbipError::Shape(format!("label has {} entries, masks have {n}", l.len())));
        }
        if l.iter().all(|&v| v == 0) {
            return Err(PbipError::EmptyLabel);
        }
    }
    let eligible = |c: usize| label.is_none_or(|l| l[c] != 0);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = None;
        for c in (0..n).filter(|&c| eligible(c)) {
            let v = m[[y, x, c]];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        best.map_or(0, |(c, _)| c as u8)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ToyPrototypeEncoder;

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(0.6, 0.4, 1.0, 0.5).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(total_loss(0.6, 0.4, 1.0, 0.0).unwrap(), 0.6);
        assert_eq!(total_loss(0.0, 0.0, 1.0, 0.5).unwrap(), 0.0);
        assert!(total_loss(f64::NAN, 0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn argmax_with_and_without_gating() {
        let m = Array3::from_shape_vec((1, 2, 3), vec![0.9, 0.1, 0.5, 0.2, 0.2, 0.7]).unwrap();
        assert_eq!(argmax_mask(&m, None).unwrap().into_raw_vec_and_offset().0, vec![0, 2]);
        assert_eq!(argmax_mask(&m, Some(&[0, 1, 0])).unwrap().into_raw_vec_and_offset().0, vec![1, 1]);
        assert_eq!(argmax_mask(&m, Some(&[1, 1, 0])).unwrap()[[0, 1]], 0);
        assert!(argmax_mask(&m, Some(&[0, 0, 0])).is_err());
    }

    fn tiny_model(cfg: &TrainConfig) -> PbipModel {
        let enc = Arc::new(ToyPrototypeEncoder::new(1));
        let p = Array3::from_shape_fn((3, 2, 32), |(n, k, j)| ((n * 7 + k * 3 + j) as f64 * 0.37).sin());
        PbipModel::new(cfg, p, enc).unwrap()
    }

    #[test]
    fn forward_shapes_and_finite_losses() {
        let cfg = TrainConfig {
            channel_dims: [4, 6, 8],
            ..TrainConfig::default()
        };
        let model = tiny_model(&cfg);
        let params = model.init_params(2);
        let img = Image::from_shape_fn((32, 32, 3), |(y, x, c)| ((y * 5 + x * 3 + c) % 17) as f32 / 16.0);
        let stack = model.predict(&params, &img).unwrap();
        assert_eq!(stack.levels[0].dim(), (8, 8, 3));
        assert_eq!(stack.levels[2].dim(), (2, 2, 3));
        assert_eq!(stack.aggregated.as_ref().unwrap().dim(), (32, 32, 3));
        let (terms, grads) = model.loss_and_grads(&params, &img, &[1, 0, 1]).unwrap();
        assert!(terms.is_finite() && terms.l_sim > 0.0);
        assert!((terms.l_total - (terms.l_cls + 0.5 * terms.l_sim)).abs() < 1e-12);
        assert_eq!(grads.len(), params.len());
        assert!(matches!(
            model.loss_and_grads(&params, &img, &[0, 0, 0]),
            Err(PbipError::EmptyLabel)
        ));
    }

    #[test]
    fn conv_head_replaces_similarity() {
        let cfg = TrainConfig {
            channel_dims: [4, 6, 8],
            mask_head: MaskHead::Conv1x1,
            ..TrainConfig::default()
        };
        let model = tiny_model(&cfg);
        let params = model.init_params(0);
        assert!(params.get("head.level3.weight").is_some());
        let img = Image::from_elem((16, 16, 3), 0.4);
        assert!(model.loss_and_grads(&params, &img, &[0, 1, 0]).unwrap().0.is_finite());
    }
}
