//! Reverse-mode automatic differentiation over dense `f64` buffers.
//!
//! A [`Tape`] records coarse-grained tensor operations (matrix products,
//! convolutions, fused losses). Every node owns a flat row-major buffer and a
//! shape; [`Tape::backward`] walks the recorded nodes in reverse and
//! accumulates gradients into every ancestor of the seed node.
//!
//! Tapes are cheap and single-threaded. Training builds one tape per image
//! and reduces parameter gradients across images afterwards.

use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Vec<f64>], &mut [Vec<f64>])>;

struct Node {
    shape: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Sparse linear operator mapping `rows_in` input rows to `rows.len()` output
/// rows; each output row is a weighted sum of input rows. Used for bilinear
/// resampling and pooling, where the same weights apply to every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    pub rows_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn rows_out(&self) -> usize {
        self.rows.len()
    }

    /// Applies the map to a `rows_in × channels` row-major buffer.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.rows_in * channels);
        let mut out = vec![0.0; self.rows.len() * channels];
        for (r, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[r * channels..(r + 1) * channels];
            for &(src, w) in taps {
                let s = &input[src * channels..(src + 1) * channels];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
        out
    }

    /// Composes `self` after `first`: `(self ∘ first)(x) = self(first(x))`.
    pub fn compose(&self, first: &SparseMap) -> SparseMap {
        assert_eq!(self.rows_in, first.rows_out());
        let rows = self
            .rows
            .iter()
            .map(|taps| {
                let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
                for &(mid, w) in taps {
                    for &(src, w2) in &first.rows[mid] {
                        *acc.entry(src).or_default() += w * w2;
                    }
                }
                acc.into_iter().filter(|(_, w)| *w != 0.0).collect()
            })
            .collect();
        SparseMap {
            rows_in: first.rows_in,
            rows,
        }
    }
}

/// How a fused contrastive loss aggregates the scores of a prototype group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

fn grad_slot<'a>(grads: &'a mut [Vec<f64>], values: &[Vec<f64>], idx: usize) -> &'a mut [f64] {
    if grads[idx].is_empty() {
        grads[idx] = vec![0.0; values[idx].len()];
    }
    &mut grads[idx]
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.values.push(value);
        self.grads.push(Vec::new());
        self.nodes.push(Node { shape, backward });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input node. Gradients are recorded for every leaf; callers
    /// decide which ones to read.
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "leaf buffer does not match shape {shape:?}"
        );
        self.push(value, shape.to_vec(), None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.values[v.0].len(), 1, "node is not a scalar");
        self.values[v.0][0]
    }

    /// Gradient of the last `backward` seed with respect to `v`. Returns
    /// zeros when `v` did not influence the seed.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![0.0; self.values[v.0].len()]
        } else {
            g.clone()
        }
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, seed: Var) {
        assert_eq!(self.values[seed.0].len(), 1, "backward seed must be scalar");
        for g in self.grads.iter_mut() {
            g.clear();
        }
        self.grads[seed.0] = vec![1.0];
        for i in (0..=seed.0).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            if let Some(bw) = &self.nodes[i].backward {
                let g = std::mem::take(&mut self.grads[i]);
                bw(&g, &self.values, &mut self.grads);
                self.grads[i] = g;
            }
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => panic!("expected a matrix, got shape {s:?}"),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.values[a.0].clone();
        assert_eq!(value.len(), shape.iter().product::<usize>());
        let ai = a.0;
        self.push(
            value,
            shape.to_vec(),
            Some(Box::new(move |g, vals, grads| {
                for (d, s) in grad_slot(grads, vals, ai).iter_mut().zip(g) {
                    *d += s;
                }
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.len(), vb.len(), "add: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                for (d, s) in grad_slot(grads, vals, ai).iter_mut().zip(g) {
                    *d += s;
                }
                for (d, s) in grad_slot(grads, vals, bi).iter_mut().zip(g) {
                    *d += s;
                }
            })),
        )
    }

    /// Sum of equally-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut it = vars.iter();
        let first = *it.next().expect("add_all needs at least one node");
        it.fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.len(), vb.len(), "mul: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                let vb = vals[bi].clone();
                for ((d, s), y) in grad_slot(grads, vals, ai).iter_mut().zip(g).zip(&vb) {
                    *d += s * y;
                }
                let va = vals[ai].clone();
                for ((d, s), x) in grad_slot(grads, vals, bi).iter_mut().zip(g).zip(&va) {
                    *d += s * x;
                }
            })),
        )
    }

    /// `scale * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.values[a.0].iter().map(|x| scale * x + offset).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                for (d, s) in grad_slot(grads, vals, ai).iter_mut().zip(g) {
                    *d += scale * s;
                }
            })),
        )
    }

    /// Elementwise product with a constant buffer.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        assert_eq!(self.values[a.0].len(), c.len(), "mul_const: length mismatch");
        let value = self.values[a.0].iter().zip(&c).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                for ((d, s), y) in grad_slot(grads, vals, ai).iter_mut().zip(g).zip(&c) {
                    *d += s * y;
                }
            })),
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value: Vec<f64> = self.values[a.0].iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let out_idx = self.nodes.len();
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                let x = vals[ai].clone();
                let y = &vals[out_idx];
                for (((d, s), xv), yv) in grad_slot(grads, vals, ai).iter_mut().zip(g).zip(&x).zip(y) {
                    *d += s * df(*xv, *yv);
                }
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamps to `[0, 1]`; gradient is zero outside the open interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(0.0, 1.0), |x, _| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 })
    }

    /// Rescales a vector to `[0, 1]` by its own minimum and maximum. A vector
    /// whose range is below `eps` is clamped to `[0, 1]` instead.
    pub fn minmax_scale(&mut self, a: Var, eps: f64) -> Var {
        let va = &self.values[a.0];
        let (mut lo, mut hi) = (0usize, 0usize);
        for (i, v) in va.iter().enumerate() {
            if *v < va[lo] {
                lo = i;
            }
            if *v > va[hi] {
                hi = i;
            }
        }
        let range = va[hi] - va[lo];
        if range < eps {
            return self.clamp01(a);
        }
        let min = va[lo];
        let value: Vec<f64> = va.iter().map(|v| (v - min) / range).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let out_idx = self.nodes.len();
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                let y = vals[out_idx].clone();
                let gx = grad_slot(grads, vals, ai);
                let (mut dlo, mut dhi) = (0.0, 0.0);
                for i in 0..g.len() {
                    gx[i] += g[i] / range;
                    dlo += g[i] * (y[i] - 1.0) / range;
                    dhi -= g[i] * y[i] / range;
                }
                gx[lo] += dlo;
                gx[hi] += dhi;
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.values[a.0].iter().sum()];
        let ai = a.0;
        self.push(
            value,
            vec![1],
            Some(Box::new(move |g, vals, grads| {
                for d in grad_slot(grads, vals, ai).iter_mut() {
                    *d += g[0];
                }
            })),
        )
    }

    /// Adds a length-N bias to every row of an `M × N` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(self.values[bias.0].len(), n, "bias length mismatch");
        let vb = &self.values[bias.0];
        let mut value = self.values[x.0].clone();
        for row in value.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(vb) {
                *v += b;
            }
        }
        let (xi, bi) = (x.0, bias.0);
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                for (d, s) in grad_slot(grads, vals, xi).iter_mut().zip(g) {
                    *d += s;
                }
                let gb = grad_slot(grads, vals, bi);
                for r in 0..m {
                    for (d, s) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += s;
                    }
                }
            })),
        )
    }

    /// `a · b` with `a: M×K`, `b: K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let value = gemm(&self.values[a.0], &self.values[b.0], m, k, n);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![m, n],
            Some(Box::new(move |g, vals, grads| {
                // dA = G · Bᵀ, dB = Aᵀ · G
                let da = gemm_bt(g, &vals[bi], m, n, k);
                for (d, s) in grad_slot(grads, vals, ai).iter_mut().zip(&da) {
                    *d += s;
                }
                let db = gemm_at(&vals[ai], g, m, k, n);
                for (d, s) in grad_slot(grads, vals, bi).iter_mut().zip(&db) {
                    *d += s;
                }
            })),
        )
    }

    /// `a · bᵀ` with `a: M×K`, `b: N×K`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_bt: inner dims {k} vs {k2}");
        let value = gemm_bt(&self.values[a.0], &self.values[b.0], m, k, n);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![m, n],
            Some(Box::new(move |g, vals, grads| {
                // dA = G · B, dB = Gᵀ · A
                let da = gemm(g, &vals[bi], m, n, k);
                for (d, s) in grad_slot(grads, vals, ai).iter_mut().zip(&da) {
                    *d += s;
                }
                let db = gemm_at(g, &vals[ai], m, n, k);
                for (d, s) in grad_slot(grads, vals, bi).iter_mut().zip(&db) {
                    *d += s;
                }
            })),
        )
    }

    /// Divides every row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, c) = self.dims2(x);
        let vx = &self.values[x.0];
        let norms: Vec<f64> = vx.chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut value = vx.clone();
        for (row, n) in value.chunks_exact_mut(c).zip(&norms) {
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
        }
        let xi = x.0;
        let out_idx = self.nodes.len();
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            value,
            shape,
            Some(Box::new(move |g, vals, grads| {
                let y = vals[out_idx].clone();
                let gx = grad_slot(grads, vals, xi);
                for r in 0..m {
                    let gr = &g[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let n = norms[r];
                    if n > eps {
                        // d(x/|x|) = (g - y (y·g)) / |x|
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            gx[r * c + j] += gr[j] / eps;
                        }
                    }
                }
            })),
        )
    }

    /// Averages consecutive column groups of width `group`: `M × (G·group)`
    /// becomes `M × G`.
    pub fn group_mean_cols(&mut self, x: Var, group: usize) -> Var {
        let (m, cols) = self.dims2(x);
        assert!(group > 0 && cols % group == 0, "group_mean_cols: bad group width");
        let g_out = cols / group;
        let vx = &self.values[x.0];
        let mut value = vec![0.0; m * g_out];
        for r in 0..m {
            for q in 0..g_out {
                let s: f64 = vx[r * cols + q * group..r * cols + (q + 1) * group].iter().sum();
                value[r * g_out + q] = s / group as f64;
            }
        }
        let xi = x.0;
        self.push(
            value,
            vec![m, g_out],
            Some(Box::new(move |g, vals, grads| {
                let gx = grad_slot(grads, vals, xi);
                for r in 0..m {
                    for q in 0..g_out {
                        let s = g[r * g_out + q] / group as f64;
                        for d in &mut gx[r * cols + q * group..r * cols + (q + 1) * group] {
                            *d += s;
                        }
                    }
                }
            })),
        )
    }

    /// Column means of an `M × N` matrix, yielding a length-N vector.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims2(x);
        let vx = &self.values[x.0];
        let mut value = vec![0.0; n];
        for row in vx.chunks_exact(n) {
            for (v, s) in value.iter_mut().zip(row) {
                *v += s;
            }
        }
        value.iter_mut().for_each(|v| *v /= m as f64);
        let xi = x.0;
        self.push(
            value,
            vec![n],
            Some(Box::new(move |g, vals, grads| {
                let gx = grad_slot(grads, vals, xi);
                for r in 0..m {
                    for j in 0..n {
                        gx[r * n + j] += g[j] / m as f64;
                    }
                }
            })),
        )
    }

    /// Stacks vectors or matrices with a common column count along rows.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one node");
        let c = self.dims2(parts[0]).1;
        let mut value = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, cc) = self.dims2(p);
            assert_eq!(cc, c, "stack_rows: column mismatch");
            spans.push((p.0, value.len(), r * c));
            value.extend_from_slice(&self.values[p.0]);
        }
        let rows = value.len() / c;
        self.push(
            value,
            vec![rows, c],
            Some(Box::new(move |g, vals, grads| {
                for &(pi, off, len) in &spans {
                    for (d, s) in grad_slot(grads, vals, pi).iter_mut().zip(&g[off..off + len]) {
                        *d += s;
                    }
                }
            })),
        )
    }

    /// Extracts column `j` of an `M × N` matrix as a length-M vector.
    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let (m, n) = self.dims2(x);
        assert!(j < n);
        let value = (0..m).map(|r| self.values[x.0][r * n + j]).collect();
        let xi = x.0;
        self.push(
            value,
            vec![m],
            Some(Box::new(move |g, vals, grads| {
                let gx = grad_slot(grads, vals, xi);
                for r in 0..m {
                    gx[r * n + j] += g[r];
                }
            })),
        )
    }

    /// Applies a [`SparseMap`] to a `rows_in × C` matrix.
    pub fn linear_map(&mut self, x: Var, map: Arc<SparseMap>) -> Var {
        let (r, c) = self.dims2(x);
        assert_eq!(r, map.rows_in, "linear_map: expected {} rows, got {r}", map.rows_in);
        let value = map.apply(&self.values[x.0], c);
        let xi = x.0;
        let rows_out = map.rows_out();
        self.push(
            value,
            vec![rows_out, c],
            Some(Box::new(move |g, vals, grads| {
                let gx = grad_slot(grads, vals, xi);
                for (o, taps) in map.rows.iter().enumerate() {
                    for &(src, w) in taps {
                        for ch in 0..c {
                            gx[src * c + ch] += w * g[o * c + ch];
                        }
                    }
                }
            })),
        )
    }

    /// Scales each row of a constant `P × C` matrix by the matching entry of
    /// a length-P weight vector.
    pub fn weight_rows_const(&mut self, w: Var, rows: Arc<Vec<f64>>, channels: usize) -> Var {
        let p = self.values[w.0].len();
        assert_eq!(rows.len(), p * channels, "weight_rows_const: shape mismatch");
        let vw = &self.values[w.0];
        let mut value = vec![0.0; p * channels];
        for i in 0..p {
            for ch in 0..channels {
                value[i * channels + ch] = vw[i] * rows[i * channels + ch];
            }
        }
        let wi = w.0;
        self.push(
            value,
            vec![p, channels],
            Some(Box::new(move |g, vals, grads| {
                let gw = grad_slot(grads, vals, wi);
                for i in 0..p {
                    let mut s = 0.0;
                    for ch in 0..channels {
                        s += g[i * channels + ch] * rows[i * channels + ch];
                    }
                    gw[i] += s;
                }
            })),
        )
    }

    /// 2-D convolution over an `H·W × C_in` feature map (row-major HWC).
    /// `weight` is `(k·k·C_in) × C_out` with rows ordered `(dy, dx, c_in)`.
    /// Out-of-bounds taps read zero.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        height: usize,
        width: usize,
        weight: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> (Var, usize, usize) {
        let (hw, cin) = self.dims2(x);
        assert_eq!(hw, height * width, "conv2d: input is not {height}×{width}");
        let (krows, cout) = self.dims2(weight);
        assert_eq!(krows, kernel * kernel * cin, "conv2d: weight rows");
        let ho = (height + 2 * pad - kernel) / stride + 1;
        let wo = (width + 2 * pad - kernel) / stride + 1;
        let vx = &self.values[x.0];
        // im2col; `taps[o*kk + t]` is the source pixel or usize::MAX for padding
        let kk = kernel * kernel;
        let mut taps = vec![usize::MAX; ho * wo * kk];
        let mut cols = vec![0.0; ho * wo * krows];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = oy * wo + ox;
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize {
                            continue;
                        }
                        let src = iy as usize * width + ix as usize;
                        let t = dy * kernel + dx;
                        taps[o * kk + t] = src;
                        cols[o * krows + t * cin..o * krows + (t + 1) * cin].copy_from_slice(&vx[src * cin..(src + 1) * cin]);
                    }
                }
            }
        }
        let mut value = gemm(&cols, &self.values[weight.0], ho * wo, krows, cout);
        let vb = &self.values[bias.0];
        assert_eq!(vb.len(), cout, "conv2d: bias length");
        for row in value.chunks_exact_mut(cout) {
            for (v, b) in row.iter_mut().zip(vb) {
                *v += b;
            }
        }
        let (xi, wi, bi) = (x.0, weight.0, bias.0);
        let out = self.push(
            value,
            vec![ho * wo, cout],
            Some(Box::new(move |g, vals, grads| {
                let np = ho * wo;
                let dw = gemm_at(&cols, g, np, krows, cout);
                for (d, s) in grad_slot(grads, vals, wi).iter_mut().zip(&dw) {
                    *d += s;
                }
                let gb = grad_slot(grads, vals, bi);
                for row in g.chunks_exact(cout) {
                    for (d, s) in gb.iter_mut().zip(row) {
                        *d += s;
                    }
                }
                let dcols = gemm_bt(g, &vals[wi], np, cout, krows);
                let gx = grad_slot(grads, vals, xi);
                for o in 0..np {
                    for t in 0..kk {
                        let src = taps[o * kk + t];
                        if src == usize::MAX {
                            continue;
                        }
                        for ch in 0..cin {
                            gx[src * cin + ch] += dcols[o * krows + t * cin + ch];
                        }
                    }
                }
            })),
        );
        (out, ho, wo)
    }

    /// Multi-label binary cross-entropy with logits `scale · z`, averaged over
    /// classes and summed over rows with the given row weights.
    /// `z` is `L × N`, `targets` has length N.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64], scale: f64, row_weights: &[f64]) -> Var {
        let (l, n) = self.dims2(z);
        assert_eq!(targets.len(), n);
        assert_eq!(row_weights.len(), l);
        let vz = &self.values[z.0];
        let mut loss = 0.0;
        for i in 0..l {
            for j in 0..n {
                let u = scale * vz[i * n + j];
                loss += row_weights[i] * (softplus(u) - targets[j] * u) / n as f64;
            }
        }
        let targets = targets.to_vec();
        let row_weights = row_weights.to_vec();
        let zi = z.0;
        self.push(
            vec![loss],
            vec![1],
            Some(Box::new(move |g, vals, grads| {
                let vz = vals[zi].clone();
                let gz = grad_slot(grads, vals, zi);
                for i in 0..l {
                    for j in 0..n {
                        let u = scale * vz[i * n + j];
                        gz[i * n + j] += g[0] * row_weights[i] * scale * (sigmoid(u) - targets[j]) / n as f64;
                    }
                }
            })),
        )
    }

    /// Softmax cross-entropy of each row of `scale · z` against the
    /// normalised target distribution `targets / Σ targets`, summed over rows
    /// with the given weights.
    pub fn softmax_ce(&mut self, z: Var, targets: &[f64], scale: f64, row_weights: &[f64]) -> Var {
        let (l, n) = self.dims2(z);
        assert_eq!(targets.len(), n);
        let total: f64 = targets.iter().sum();
        assert!(total > 0.0, "softmax_ce: empty target");
        let q: Vec<f64> = targets.iter().map(|t| t / total).collect();
        let vz = &self.values[z.0];
        let mut loss = 0.0;
        let mut probs = vec![0.0; l * n];
        for i in 0..l {
            let row: Vec<f64> = (0..n).map(|j| scale * vz[i * n + j]).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|u| (u - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
                loss -= row_weights[i] * q[j] * (row[j] - lse);
            }
        }
        let row_weights = row_weights.to_vec();
        let zi = z.0;
        self.push(
            vec![loss],
            vec![1],
            Some(Box::new(move |g, vals, grads| {
                let gz = grad_slot(grads, vals, zi);
                for i in 0..l {
                    for j in 0..n {
                        gz[i * n + j] += g[0] * row_weights[i] * scale * (probs[i * n + j] - q[j]);
                    }
                }
            })),
        )
    }

    /// Mean per-row softmax cross-entropy against integer labels; rows whose
    /// label is `None` are skipped.
    pub fn pixel_cross_entropy(&mut self, z: Var, labels: &[Option<usize>]) -> Var {
        let (m, n) = self.dims2(z);
        assert_eq!(labels.len(), m);
        let vz = &self.values[z.0];
        let counted = labels.iter().filter(|l| l.is_some()).count().max(1) as f64;
        let mut loss = 0.0;
        let mut dz = vec![0.0; m * n];
        for r in 0..m {
            let Some(t) = labels[r] else { continue };
            let row = &vz[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|u| (u - mx).exp()).sum::<f64>().ln();
            loss -= (row[t] - lse) / counted;
            for j in 0..n {
                let p = (row[j] - lse).exp();
                dz[r * n + j] = (p - if j == t { 1.0 } else { 0.0 }) / counted;
            }
        }
        let zi = z.0;
        self.push(
            vec![loss],
            vec![1],
            Some(Box::new(move |g, vals, grads| {
                for (d, s) in grad_slot(grads, vals, zi).iter_mut().zip(&dz) {
                    *d += g[0] * s;
                }
            })),
        )
    }

    /// Two-way contrastive loss over a score matrix.
    ///
    /// `scores` is `R × (G·group)`: row `r` holds the similarities of one
    /// region feature to `G` prototype groups of width `group`. `row_class[r]`
    /// selects the positive group. Per row the positive score aggregates the
    /// positive group, the negative score aggregates every other group, and
    /// the row term is `softplus((neg - pos) / temp)`. Returns the row mean.
    pub fn contrastive_rows(
        &mut self,
        scores: Var,
        row_class: &[usize],
        group: usize,
        temp: f64,
        positive: Reduce,
        negative: Reduce,
    ) -> Var {
        let (r, cols) = self.dims2(scores);
        assert_eq!(row_class.len(), r, "contrastive_rows: one class per row");
        assert!(r > 0, "contrastive_rows: no rows");
        assert!(cols % group == 0 && group > 0);
        let groups = cols / group;
        assert!(groups >= 2, "contrastive_rows: need a negative group");
        let pos_count = group as f64;
        let neg_count = ((groups - 1) * group) as f64;
        let pos_w = match positive {
            Reduce::Sum => 1.0,
            Reduce::Mean => 1.0 / pos_count,
        };
        let neg_w = match negative {
            Reduce::Sum => 1.0,
            Reduce::Mean => 1.0 / neg_count,
        };
        let vs = &self.values[scores.0];
        let mut loss = 0.0;
        let mut dgap = Vec::with_capacity(r);
        for (row, &j) in row_class.iter().enumerate() {
            assert!(j < groups);
            let s = &vs[row * cols..(row + 1) * cols];
            let pos: f64 = s[j * group..(j + 1) * group].iter().sum::<f64>() * pos_w;
            let neg: f64 = s[..j * group].iter().chain(&s[(j + 1) * group..]).sum::<f64>() * neg_w;
            let x = (neg - pos) / temp;
            loss += softplus(x);
            dgap.push(sigmoid(x) / temp / r as f64);
        }
        loss /= r as f64;
        let row_class = row_class.to_vec();
        let si = scores.0;
        self.push(
            vec![loss],
            vec![1],
            Some(Box::new(move |g, vals, grads| {
                let gs = grad_slot(grads, vals, si);
                for (row, &j) in row_class.iter().enumerate() {
                    let d = g[0] * dgap[row];
                    for q in 0..groups {
                        let w = if q == j { -d * pos_w } else { d * neg_w };
                        for c in q * group..(q + 1) * group {
                            gs[row * cols + c] += w;
                        }
                    }
                }
            })),
        )
    }
}

/// `A (m×k) · B (k×n)`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A (m×k) · Bᵀ` where `B` is `n×k`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ · B` where `A` is `m×k` and `B` is `m×n`; result is `k×n`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Vec<f64>, shape: &[usize]) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), shape);
        let y = build(&mut tape, x);
        tape.backward(y);
        let g = tape.grad(x);
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let mut xv = x0.clone();
                xv[i] += delta;
                let x = t.leaf(xv, shape);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} vs ad {}",
                g[i]
            );
        }
    }

    #[test]
    fn matmul_and_normalize_gradients() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        fd_check(
            move |t, x| {
                let wv = t.leaf(w.clone(), &[4, 3]);
                let y = t.matmul(x, wv);
                let y = t.l2_normalize_rows(y, 1e-8);
                let y = t.tanh(y);
                t.sum(y)
            },
            (0..8).map(|i| (i as f64 * 0.91).cos()).collect(),
            &[2, 4],
        );
    }

    #[test]
    fn conv_gradient_matches_fd() {
        let w: Vec<f64> = (0..9 * 2 * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        fd_check(
            move |t, x| {
                let wv = t.leaf(w.clone(), &[18, 3]);
                let b = t.leaf(vec![0.1, -0.2, 0.3], &[3]);
                let (y, _, _) = t.conv2d(x, 5, 5, wv, b, 3, 2, 1);
                let y = t.tanh(y);
                t.sum(y)
            },
            (0..50).map(|i| (i as f64 * 0.13).sin()).collect(),
            &[25, 2],
        );
    }

    #[test]
    fn contrastive_gradient_matches_fd() {
        fd_check(
            |t, s| t.contrastive_rows(s, &[0, 2], 2, 0.7, Reduce::Sum, Reduce::Mean),
            (0..12).map(|i| (i as f64 * 0.57).sin()).collect(),
            &[2, 6],
        );
    }

    #[test]
    fn bce_and_softmax_gradients_match_fd() {
        fd_check(
            |t, z| t.bce_with_logits(z, &[1.0, 0.0, 1.0], 3.0, &[1.0, 0.5]),
            vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.8],
            &[2, 3],
        );
        fd_check(
            |t, z| t.softmax_ce(z, &[1.0, 0.0, 1.0], 2.0, &[1.0, 1.0]),
            vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.8],
            &[2, 3],
        );
        fd_check(
            |t, z| t.pixel_cross_entropy(z, &[Some(1), None, Some(0)]),
            vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.8],
            &[3, 2],
        );
    }

    #[test]
    fn minmax_gradient_matches_fd() {
        fd_check(
            |t, x| {
                let y = t.minmax_scale(x, 1e-9);
                let w = t.leaf(vec![0.3, -1.0, 2.0, 0.5, 1.5], &[5]);
                let y = t.mul(y, w);
                t.sum(y)
            },
            vec![0.2, -0.7, 1.3, 0.4, 0.9],
            &[5],
        );
    }

    #[test]
    fn sparse_map_compose() {
        let a = SparseMap {
            rows_in: 2,
            rows: vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]],
        };
        let b = SparseMap {
            rows_in: 2,
            rows: vec![vec![(0, 2.0)]],
        };
        let c = b.compose(&a);
        assert_eq!(c.apply(&[1.0, 3.0], 1), vec![4.0]);
    }
}
