//! Encoder contracts and the toy implementations used at desk scale.
//!
//! A [`PrototypeEncoder`] is frozen: it maps an image to a `d`-vector and its
//! weights never enter the trainable [`ParamStore`]. It is still
//! differentiable with respect to its *input*, which lets foreground and
//! background crops pass gradients back to the mask that produced them.
//!
//! A [`HierarchicalBackbone`] produces three feature maps at strides 4, 8
//! and 16. Its weights live in a [`ParamStore`] so the optimiser can update
//! them.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMap, Tape, Var};
use crate::data::Image;
use crate::error::{PbipError, Result};
use crate::resample;

fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Named trainable arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        self.params.insert(
            name.into(),
            Param {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.data.clone(), &p.shape)))
            .collect();
        BoundParams { vars }
    }

    /// He-style normal initialisation scaled by `1/sqrt(fan_in)`.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) {
        let std = gain / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        self.insert(name, shape, data);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![0.0; shape.iter().product()]);
    }
}

/// Parameters placed on a tape, looked up by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not in the store"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects the gradient of every bound parameter after `backward`.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars.iter().map(|(k, v)| (k.clone(), tape.grad(*v))).collect()
    }
}

/// A feature map on a tape: `height·width` rows of `channels` values.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Puts an image on a tape as an `H·W × 3` constant.
pub fn image_leaf(tape: &mut Tape, image: &Image) -> Var {
    let (h, w, c) = image.dim();
    tape.leaf(image.iter().map(|&v| v as f64).collect(), &[h * w, c])
}

/// Frozen image encoder producing one `d`-vector per image.
pub trait PrototypeEncoder: Send + Sync {
    /// Stable identifier, used as a feature-cache key.
    fn id(&self) -> String;

    fn embed_dim(&self) -> usize;

    /// Side length images are resized to before encoding.
    fn input_size(&self) -> usize;

    /// Differentiable encoding of an `H·W × 3` node to a `1 × d` node.
    fn encode_var(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<Var>;

    /// Byte snapshot of the frozen weights.
    fn fingerprint(&self) -> Vec<u8>;

    fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(PbipError::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        let mut tape = Tape::new();
        let x = image_leaf(&mut tape, image);
        let y = self.encode_var(&mut tape, x, h, w)?;
        Ok(tape.value(y).to_vec())
    }
}

/// Trainable multi-scale backbone with feature strides 4, 8 and 16.
pub trait HierarchicalBackbone: Send + Sync {
    fn channel_dims(&self) -> [usize; 3];

    /// Adds freshly initialised weights to `store`.
    fn init_params(&self, store: &mut ParamStore, seed: u64);

    fn forward_var(&self, tape: &mut Tape, params: &BoundParams, image: Var, height: usize, width: usize) -> Result<[FeatureMap; 3]>;
}

/// Checks the divisibility contract shared by every backbone.
pub fn check_backbone_input(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(16) || !width.is_multiple_of(16) {
        return Err(PbipError::Shape(format!(
            "backbone input {height}×{width}: height and width must be positive multiples of 16"
        )));
    }
    Ok(())
}

/// Runs a backbone outside training and returns `(h, w, C_i)` arrays.
pub fn backbone_forward(backbone: &dyn HierarchicalBackbone, params: &ParamStore, image: &Image) -> Result<[Array3<f64>; 3]> {
    let (h, w, _) = image.dim();
    check_backbone_input(h, w)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = image_leaf(&mut tape, image);
    let maps = backbone.forward_var(&mut tape, &bound, x, h, w)?;
    Ok(maps.map(|m| Array3::from_shape_vec((m.height, m.width, m.channels), tape.value(m.var).to_vec()).expect("feature map")))
}

/// Fixed random linear map over 8×8-pooled pixels followed by `tanh`.
pub struct ToyPrototypeEncoder {
    weight: Vec<f64>,
    bias: Vec<f64>,
    embed_dim: usize,
    seed: u64,
    maps: Mutex<HashMap<(usize, usize), Arc<SparseMap>>>,
}

impl ToyPrototypeEncoder {
    pub const INPUT_SIZE: usize = 64;
    pub const POOL: usize = 8;
    pub const DEFAULT_DIM: usize = 32;

    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, Self::DEFAULT_DIM)
    }

    pub fn with_dim(seed: u64, embed_dim: usize) -> Self {
        let cells = Self::INPUT_SIZE / Self::POOL;
        let fan_in = cells * cells * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70_7e_c0_de);
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * embed_dim).map(|_| std * standard_normal(&mut rng)).collect();
        let bias = (0..embed_dim).map(|_| 0.1 * standard_normal(&mut rng)).collect();
        Self {
            weight,
            bias,
            embed_dim,
            seed,
            maps: Mutex::new(HashMap::new()),
        }
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn input_map(&self, height: usize, width: usize) -> Arc<SparseMap> {
        let mut maps = self.maps.lock().expect("encoder map cache poisoned");
        maps.entry((height, width))
            .or_insert_with(|| {
                let s = Self::INPUT_SIZE;
                let pool = resample::average_pool(s, s, Self::POOL);
                Arc::new(if (height, width) == (s, s) {
                    pool
                } else {
                    pool.compose(&resample::bilinear(height, width, s, s))
                })
            })
            .clone()
    }
}

impl PrototypeEncoder for ToyPrototypeEncoder {
    fn id(&self) -> String {
        format!("toy-encoder-d{}-s{}", self.embed_dim, self.seed)
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn input_size(&self) -> usize {
        Self::INPUT_SIZE
    }

    fn encode_var(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape != [height * width, 3] {
            return Err(PbipError::Shape(format!(
                "encoder expects a {height}·{width} × 3 image, got {shape:?}"
            )));
        }
        let pooled = tape.linear_map(image, self.input_map(height, width));
        let fan_in = tape.value(pooled).len();
        let flat = tape.reshape(pooled, &[1, fan_in]);
        let w = tape.leaf(self.weight.clone(), &[fan_in, self.embed_dim]);
        let b = tape.leaf(self.bias.clone(), &[self.embed_dim]);
        let z = tape.matmul(flat, w);
        let z = tape.add_row_bias(z, b);
        Ok(tape.tanh(z))
    }

    fn fingerprint(&self) -> Vec<u8> {
        self.weight.iter().chain(&self.bias).flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Strided 3×3 convolution stack: a stride-2 stem followed by three
/// stride-2 stages, each with a stride-1 refinement convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub channel_dims: [usize; 3],
    pub stem_channels: usize,
}

impl ToyBackbone {
    pub fn new(channel_dims: [usize; 3]) -> Result<Self> {
        if channel_dims[0] == 0 || channel_dims[0] >= channel_dims[1] || channel_dims[1] >= channel_dims[2] {
            return Err(PbipError::Config(format!(
                "channel dims must be strictly increasing and positive, got {channel_dims:?}"
            )));
        }
        Ok(Self {
            channel_dims,
            stem_channels: channel_dims[0].div_ceil(2).max(4),
        })
    }

    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let [c1, c2, c3] = self.channel_dims;
        let c0 = self.stem_channels;
        vec![
            ("backbone.stem".into(), 3, c0, 2),
            ("backbone.stage1.down".into(), c0, c1, 2),
            ("backbone.stage1.conv".into(), c1, c1, 1),
            ("backbone.stage2.down".into(), c1, c2, 2),
            ("backbone.stage2.conv".into(), c2, c2, 1),
            ("backbone.stage3.down".into(), c2, c3, 2),
            ("backbone.stage3.conv".into(), c3, c3, 1),
        ]
    }
}

impl HierarchicalBackbone for ToyBackbone {
    fn channel_dims(&self) -> [usize; 3] {
        self.channel_dims
    }

    fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbac6_b0e5);
        for (name, cin, cout, _) in self.layers() {
            store.init_normal(&format!("{name}.weight"), &[9 * cin, cout], 9 * cin, 1.0, &mut rng);
            store.init_zeros(&format!("{name}.bias"), &[cout]);
        }
    }

    fn forward_var(&self, tape: &mut Tape, params: &BoundParams, image: Var, height: usize, width: usize) -> Result<[FeatureMap; 3]> {
        check_backbone_input(height, width)?;
        let mut x = image;
        let (mut h, mut w) = (height, width);
        let mut outs = Vec::with_capacity(3);
        for (name, _, cout, stride) in self.layers() {
            let wv = params.var(&format!("{name}.weight"));
            let bv = params.var(&format!("{name}.bias"));
            let (y, ho, wo) = tape.conv2d(x, h, w, wv, bv, 3, stride, 1);
            x = tape.tanh(y);
            (h, w) = (ho, wo);
            if name.ends_with(".conv") {
                outs.push(FeatureMap {
                    var: x,
                    height: h,
                    width: w,
                    channels: cout,
                });
            }
        }
        Ok([outs[0], outs[1], outs[2]])
    }
}

/// Per-level two-layer perceptrons mapping `d`-dim prototype features to
/// each backbone level's channel width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeProjector {
    pub input_dim: usize,
    pub channel_dims: [usize; 3],
}

impl PrototypeProjector {
    pub fn new(input_dim: usize, channel_dims: [usize; 3]) -> Self {
        Self { input_dim, channel_dims }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e0_1ec7);
        for (level, &c) in self.channel_dims.iter().enumerate() {
            let p = format!("projector.level{}", level + 1);
            store.init_normal(
                &format!("{p}.fc1.weight"),
                &[self.input_dim, c],
                self.input_dim,
                2f64.sqrt(),
                &mut rng,
            );
            store.init_zeros(&format!("{p}.fc1.bias"), &[c]);
            store.init_normal(&format!("{p}.fc2.weight"), &[c, c], c, 1.0, &mut rng);
            store.init_zeros(&format!("{p}.fc2.bias"), &[c]);
        }
    }

    /// Projects an `R × d` node to one `R × C_i` node per level.
    pub fn project_var(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<[Var; 3]> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(PbipError::Config(format!(
                "projector expects {}-dim inputs, got shape {shape:?}",
                self.input_dim
            )));
        }
        let mut out = Vec::with_capacity(3);
        for level in 1..=3 {
            let p = format!("projector.level{level}");
            let h = tape.matmul(x, params.var(&format!("{p}.fc1.weight")));
            let h = tape.add_row_bias(h, params.var(&format!("{p}.fc1.bias")));
            let h = tape.relu(h);
            let y = tape.matmul(h, params.var(&format!("{p}.fc2.weight")));
            out.push(tape.add_row_bias(y, params.var(&format!("{p}.fc2.bias"))));
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// Projects `N × K × d` prototype features to one `N × K × C_i` array per level.
pub fn project_prototypes(projector: &PrototypeProjector, params: &ParamStore, prototypes: &Array3<f64>) -> Result<[Array3<f64>; 3]> {
    let (n, k, d) = prototypes.dim();
    if d != projector.input_dim {
        return Err(PbipError::Config(format!(
            "prototype dim {d} does not match projector input dim {}",
            projector.input_dim
        )));
    }
    if prototypes.iter().any(|v| !v.is_finite()) {
        return Err(PbipError::Domain("prototype features must be finite".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(prototypes.iter().copied().collect(), &[n * k, d]);
    let ys = projector.project_var(&mut tape, &bound, x)?;
    Ok(std::array::from_fn(|i| {
        Array3::from_shape_vec((n, k, projector.channel_dims[i]), tape.value(ys[i]).to_vec()).expect("projection")
    }))
}

/// Flattens an `N × K × d` array to `N·K` rows.
pub fn flatten_prototypes(p: &Array3<f64>) -> Array2<f64> {
    let (n, k, d) = p.dim();
    p.as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * k, d))
        .expect("contiguous prototypes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy_image(h: usize, w: usize, salt: f32) -> Image {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            (((y * 7 + x * 3 + c * 11) % 17) as f32 / 17.0 + salt).fract()
        })
    }

    #[test]
    fn zero_image_encodes_to_tanh_of_bias() {
        let enc = ToyPrototypeEncoder::new(0);
        let v = enc.encode(&Array3::zeros((64, 64, 3))).unwrap();
        let golden: Vec<f64> = enc.bias().iter().map(|b| b.tanh()).collect();
        assert_eq!(v, golden);
        assert_eq!(v.len(), 32);
    }

    #[test]
    fn encoder_is_deterministic_and_separates_one_pixel_edits() {
        let enc = ToyPrototypeEncoder::new(3);
        let img = toy_image(64, 64, 0.0);
        assert_eq!(enc.encode(&img).unwrap(), enc.encode(&img).unwrap());
        let base = enc.encode(&img).unwrap();
        for (y, x) in [(0, 0), (13, 40), (63, 63)] {
            let mut other = img.clone();
            other[[y, x, 1]] = (other[[y, x, 1]] + 0.5).fract();
            assert_ne!(enc.encode(&other).unwrap(), base, "edit at ({y},{x})");
        }
    }

    #[test]
    fn encoder_rejects_wrong_channel_count() {
        let enc = ToyPrototypeEncoder::new(0);
        assert!(matches!(enc.encode(&Array3::zeros((64, 64, 4))), Err(PbipError::Shape(_))));
    }

    #[test]
    fn encoder_accepts_other_resolutions() {
        let enc = ToyPrototypeEncoder::new(0);
        assert_eq!(enc.encode(&toy_image(16, 16, 0.2)).unwrap().len(), 32);
        assert_eq!(enc.encode(&toy_image(224, 224, 0.2)).unwrap().len(), 32);
    }

    #[test]
    fn backbone_shapes_follow_stride_contract() {
        let bb = ToyBackbone::new([8, 16, 32]).unwrap();
        let mut store = ParamStore::new();
        bb.init_params(&mut store, 0);
        let maps = backbone_forward(&bb, &store, &toy_image(64, 64, 0.1)).unwrap();
        assert_eq!(maps[0].dim(), (16, 16, 8));
        assert_eq!(maps[1].dim(), (8, 8, 16));
        assert_eq!(maps[2].dim(), (4, 4, 32));
        let maps = backbone_forward(&bb, &store, &toy_image(224, 224, 0.1)).unwrap();
        assert_eq!(maps[0].dim(), (56, 56, 8));
        assert_eq!(maps[1].dim(), (28, 28, 16));
        assert_eq!(maps[2].dim(), (14, 14, 32));
        let err = backbone_forward(&bb, &store, &toy_image(60, 60, 0.1)).unwrap_err();
        assert!(err.to_string().contains("multiples of 16"));
    }

    #[test]
    fn backbone_rejects_non_increasing_channels() {
        assert!(ToyBackbone::new([16, 16, 32]).is_err());
    }

    #[test]
    fn projection_shapes_and_dim_check() {
        let proj = PrototypeProjector::new(512, [64, 128, 320]);
        let mut store = ParamStore::new();
        proj.init_params(&mut store, 1);
        let p = Array3::from_shape_fn((4, 3, 512), |(a, b, c)| ((a + 2 * b + c) as f64 * 0.01).sin());
        let out = project_prototypes(&proj, &store, &p).unwrap();
        assert_eq!(out[0].dim(), (4, 3, 64));
        assert_eq!(out[1].dim(), (4, 3, 128));
        assert_eq!(out[2].dim(), (4, 3, 320));
        let bad = Array3::zeros((4, 3, 32));
        assert!(matches!(project_prototypes(&proj, &store, &bad), Err(PbipError::Config(_))));
    }

    #[test]
    fn zero_second_layer_gives_zero_output() {
        let proj = PrototypeProjector::new(8, [4, 6, 10]);
        let mut store = ParamStore::new();
        proj.init_params(&mut store, 2);
        for (name, p) in store.iter_mut() {
            if name.contains("fc2") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let p = Array3::from_elem((2, 3, 8), 0.7);
        for level in project_prototypes(&proj, &store, &p).unwrap() {
            assert!(level.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let proj = PrototypeProjector::new(6, [3, 4, 5]);
        let mut store = ParamStore::new();
        proj.init_params(&mut store, 4);
        let p = Array3::from_shape_fn((2, 2, 6), |(a, b, c)| ((a * 5 + b * 3 + c) as f64 * 0.37).sin());
        let eval = |store: &ParamStore| -> f64 { project_prototypes(&proj, store, &p).unwrap().iter().map(|a| a.sum()).sum() };
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(p.iter().copied().collect(), &[4, 6]);
        let ys = proj.project_var(&mut tape, &bound, x).unwrap();
        let sums: Vec<Var> = ys.iter().map(|&y| tape.sum(y)).collect();
        let total = tape.add_all(&sums);
        tape.backward(total);
        let grads = bound.grads(&tape);
        let h = 1e-6;
        for (name, g) in &grads {
            for i in 0..g.len() {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                assert!((fd - g[i]).abs() / denom < 1e-4, "{name}[{i}]: fd {fd} vs {}", g[i]);
            }
        }
    }
}
