//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix. Feature maps are stored channel-major as
//! `(channels, height * width)` with the spatial shape carried by the conv op.
//! A [`Graph`] borrows a [`ParamStore`] read-only, so several graphs (one per
//! sample) can share the same parameters and have their gradients summed.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which optimizer schedule a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Visual,
    Projection,
    /// Token embedding table shared by both decoders (and tied to the output).
    Textual,
    Forward,
    Backward,
    Head,
}

impl ParamGroup {
    pub fn is_visual(self) -> bool {
        matches!(self, ParamGroup::Visual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub group: ParamGroup,
    /// False for biases and normalization gains.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: ParamGroup, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "parameter `{name}` registered twice");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Copies every array whose name starts with `prefix` from `other`.
    /// Returns how many arrays were copied.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            if let Some(id) = other.id(&e.name) {
                let src = other.get(id);
                if src.dim() == e.value.dim() {
                    e.value.assign(src);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.entries.iter().map(|e| Mat::zeros(e.value.raw_dim())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64]) -> Mat {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let mut cols = Mat::zeros((self.patch(), oh * ow));
        let out = cols.as_slice_mut().expect("fresh matrix is contiguous");
        let npos = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut out[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Mat) -> Mat {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let npos = oh * ow;
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let mut x = Mat::zeros((self.in_channels, self.in_h * self.in_w));
        let dst = x.as_slice_mut().expect("fresh matrix is contiguous");
        for c in 0..self.in_channels {
            let plane = &mut dst[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let col = &src[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                plane[iy as usize * self.in_w + ix as usize] += col[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `(n × m) + (1 × m)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Mat,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Rows {
        x: Var,
        start: usize,
    },
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    /// `(c × n)` → `(1 × c)` mean over the n columns.
    PoolChannels(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// A recorded computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// `x · w + b` with `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// 2-D convolution; `w` is `(out_c, in_c·k·k)`, `b` is `(out_c, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.in_channels, geom.in_h * geom.in_w), "conv input shape");
        let cols = {
            let xs = xv.as_standard_layout();
            geom.im2col(xs.as_slice().expect("standard layout"))
        };
        let mut out = self.value(w).dot(&cols);
        out += self.value(b);
        self.push(out, Op::Conv { x, w, b, geom, cols })
    }

    /// Row-wise layer normalization with `1 × m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / m;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut out = self.value(x).clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
            let max = row.iter().take(limit).cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < limit {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row /= sum;
        }
        self.push(out, Op::Softmax { x })
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::Rows { x, start })
    }

    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Cols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn pool_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let out = xv.sum_axis(Axis(1)).mapv(|v| v / n).insert_axis(Axis(0));
        self.push(out, Op::PoolChannels(x))
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from `seeds` (typically a scalar loss seeded with 1).
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        for (id, v) in &self.param_vars {
            params[id.0] = grads[v.0].take();
        }
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                accumulate(grads, *a, g.dot(self.value(*b)));
                accumulate(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::Relu(a) => {
                let out = node.value.as_ref().expect("owned");
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(out).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Conv { x, w, b, geom, cols } => {
                accumulate(grads, *w, g.dot(&cols.t()));
                accumulate(grads, *b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                let dcols = self.value(*w).t().dot(g);
                accumulate(grads, *x, geom.col2im(&dcols));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                accumulate(grads, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gv = self.value(*gain);
                let m = g.ncols() as f64;
                let mut dx = g * gv;
                for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                    let sum = row.sum();
                    let dot: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                    for (d, &h) in row.iter_mut().zip(xh.iter()) {
                        *d = is / m * (m * *d - sum - h * dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = node.value.as_ref().expect("owned");
                let mut dx = g * y;
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    row.zip_mut_with(&yr, |d, &yv| *d -= yv * s);
                }
                accumulate(grads, *x, dx);
            }
            Op::Embed { table, ids } => {
                let mut dt = Mat::zeros(self.value(*table).raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut r = dt.row_mut(id);
                    r += &g.row(i);
                }
                accumulate(grads, *table, dt);
            }
            Op::Rows { x, start } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *x, dx);
            }
            Op::Cols { x, start } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::PoolChannels(x) => {
                let n = self.value(*x).ncols();
                let col = g.row(0).mapv(|v| v / n as f64);
                let dx = Mat::from_shape_fn((col.len(), n), |(c, _)| col[c]);
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g[[0, 0]];
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                d *= scale;
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to a non-parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params[id.0].as_ref()
    }

    /// Adds this graph's parameter gradients into `acc` (one matrix per parameter).
    pub fn accumulate_into(&self, acc: &mut [Mat], weight: f64) {
        for (a, g) in acc.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                a.scaled_add(weight, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry of a small store.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            let grads = g.backward(&[(loss, Mat::from_elem((1, 1), 1.0))]);
            store
                .ids()
                .map(|id| {
                    grads
                        .param(id)
                        .cloned()
                        .unwrap_or_else(|| Mat::zeros(store.get(id).raw_dim()))
                })
                .collect::<Vec<_>>()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.scalar(l)
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[k];
                store.get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
                let up = eval(store);
                store.get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
                let down = eval(store);
                store.get_mut(id).as_slice_mut().unwrap()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[id.0].as_slice().unwrap()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{} [{k}]: analytic {an} vs numeric {fd}",
                    store.entry(id).name
                );
            }
        }
    }

    #[test]
    fn conv_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = ConvGeom {
            in_channels: 2,
            in_h: 5,
            in_w: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, 2, 20), ParamGroup::Visual, true);
        let w = store.add("w", random(&mut rng, 3, 18), ParamGroup::Visual, true);
        let b = store.add("b", random(&mut rng, 3, 1), ParamGroup::Visual, false);
        let proj = store.add("proj", random(&mut rng, 3, 4), ParamGroup::Projection, true);
        check(&mut store, |g| {
            let (x, w, b, p) = (g.param(x), g.param(w), g.param(b), g.param(proj));
            let y = g.conv2d(x, w, b, geom);
            let t = g.transpose(y);
            let z = g.matmul(t, p);
            let pooled = g.pool_channels(y);
            let pz = g.matmul(pooled, p);
            let zz = g.rows(z, 1, 1);
            let logits = g.add(zz, pz);
            g.cross_entropy(logits, &[2])
        });
    }

    #[test]
    fn attention_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let table = store.add("table", random(&mut rng, 5, 4), ParamGroup::Textual, true);
        let pos = store.add("pos", random(&mut rng, 6, 4), ParamGroup::Forward, true);
        let gain = store.add("gain", random(&mut rng, 1, 4), ParamGroup::Forward, false);
        let bias = store.add("bias", random(&mut rng, 1, 4), ParamGroup::Forward, false);
        let wq = store.add("wq", random(&mut rng, 4, 4), ParamGroup::Forward, true);
        let mem = store.add("mem", random(&mut rng, 3, 4), ParamGroup::Projection, true);
        check(&mut store, |g| {
            let t = g.param(table);
            let e = g.embed(t, &[1, 3, 3, 0]);
            let p = g.param(pos);
            let p = g.rows(p, 0, 4);
            let x = g.add(e, p);
            let (gn, bs) = (g.param(gain), g.param(bias));
            let x = g.layer_norm(x, gn, bs);
            let q = g.param(wq);
            let q = g.matmul(x, q);
            let h0 = g.cols(q, 0, 2);
            let h1 = g.cols(x, 2, 2);
            let sc = g.matmul_nt(h0, h1);
            let sc = g.scale(sc, 0.7);
            let a = g.softmax(sc, true);
            let o0 = g.matmul(a, h1);
            let m = g.param(mem);
            let cs = g.matmul_nt(x, m);
            let ca = g.softmax(cs, false);
            let cm = g.matmul(ca, m);
            let o1 = g.cols(cm, 0, 2);
            let cat = g.concat_cols(&[o0, o1]);
            let r = g.relu(cat);
            let y = g.add(x, r);
            let logits = g.matmul_nt(y, t);
            g.cross_entropy(logits, &[3, 3, 0, 2])
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_elem((3, 3), 0.5));
        let y = g.softmax(x, true);
        let v = g.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[0, 0]], 1.0);
        assert!((v[[2, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }
}
