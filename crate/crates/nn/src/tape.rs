//! Reverse-mode tape over small dense arrays.
//!
//! Every op appends a node holding its `f64` output and the ids of its
//! inputs. [`Tape::backward`] walks the nodes once in reverse, so a tape
//! supports exactly one backward pass. Parameters enter the tape through
//! [`Tape::param`], which remembers the store name so gradients can be
//! folded back with [`Tape::accumulate_grads`].

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var },
    Relu(Var),
    Concat(Vec<Var>),
    MeanPool(Var),
    Tokens(Var),
    Reshape(Var),
    Attention {
        keys: Var,
        values: Var,
        query: Var,
        weights: Vec<f64>,
    },
    Pick { x: Var, index: usize },
    Mse { pred: Var, target: Var },
    Scale { x: Var, factor: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op_name, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input. Gradients still flow into it and can be read back.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        self.push("leaf", tensor.shape().to_vec(), tensor.to_f64(), Op::Leaf)
    }

    pub fn leaf_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(shape_err("leaf", format!("shape {shape:?} vs {} values", value.len())));
        }
        self.push("leaf", shape, value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let v = self.leaf(tensor)?;
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Affine map `y = x·Wᵀ + b` with `W: [out, in]`. `x` is `[in]` or `[rows, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || bs != [ws[0]] {
            return Err(shape_err("dense", format!("weight {ws:?}, bias {bs:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        let (rows, out_shape) = match xs.as_slice() {
            [n] if *n == inp => (1, vec![out]),
            [r, n] if *n == inp => (*r, vec![*r, out]),
            _ => return Err(shape_err("dense", format!("input {xs:?} vs weight {ws:?}"))),
        };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wv[o * inp..(o + 1) * inp];
                let acc: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                y.push(acc + bv[o]);
            }
        }
        self.push("dense", out_shape, y, Op::Dense { x, w, b })
    }

    /// Stride-1 cross-correlation with zero padding that preserves `H×W`.
    /// `x: [C, H, W]`, `k: [O, C, kh, kw]` (odd kernel sides), `b: [O]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || bs != [ks[0]] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, kernels {ks:?}, bias {bs:?}"),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel sides must be odd, got {ks:?}")));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let xv = self.value(x);
        let kv = self.value(k);
        let bv = self.value(b);
        let mut y = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bv[o];
                    for c in 0..c_in {
                        for di in 0..kh {
                            let yi = i as isize + di as isize - ph;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let xj = j as isize + dj as isize - pw;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                acc += kv[((o * c_in + c) * kh + di) * kw + dj]
                                    * xv[(c * h + yi as usize) * w + xj as usize];
                            }
                        }
                    }
                    y[(o * h + i) * w + j] = acc;
                }
            }
        }
        self.push("conv2d", vec![c_out, h, w], y, Op::Conv2d { x, k, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, y, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, y, Op::Scale { x, factor })
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut y = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(shape_err("concat", format!("part has shape {:?}", self.shape(p))));
            }
            y.extend_from_slice(self.value(p));
        }
        let n = y.len();
        self.push("concat", vec![n], y, Op::Concat(parts.to_vec()))
    }

    /// Global average over the spatial axes: `[C, H, W] -> [C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] * xs[2] == 0 {
            return Err(shape_err("mean_pool", format!("input {xs:?}")));
        }
        let area = xs[1] * xs[2];
        let y = self
            .value(x)
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        self.push("mean_pool", vec![xs[0]], y, Op::MeanPool(x))
    }

    /// One row per spatial cell: `[C, H, W] -> [H·W, C]`.
    pub fn tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("tokens", format!("input {xs:?}")));
        }
        let (c, area) = (xs[0], xs[1] * xs[2]);
        let xv = self.value(x);
        let mut y = vec![0.0; c * area];
        for ch in 0..c {
            for t in 0..area {
                y[t * c + ch] = xv[ch * area + t];
            }
        }
        self.push("tokens", vec![area, c], y, Op::Tokens(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let y = self.value(x).to_vec();
        self.push("reshape", shape, y, Op::Reshape(x))
    }

    /// Softmax attention with scaled dot-product similarity.
    ///
    /// `keys: [T, d]`, `values: [T, dv]`, `query: [d]`; returns `[dv]`.
    /// Weights are kept on the node, see [`Tape::attention_weights`].
    pub fn attention(&mut self, keys: Var, values: Var, query: Var) -> Result<Var> {
        let ks = self.shape(keys).to_vec();
        let vs = self.shape(values).to_vec();
        let qs = self.shape(query).to_vec();
        if ks.len() != 2 || vs.len() != 2 || qs.len() != 1 {
            return Err(shape_err("attention", format!("keys {ks:?}, values {vs:?}, query {qs:?}")));
        }
        if ks[0] == 0 {
            return Err(NnError::EmptyAttention);
        }
        if ks[0] != vs[0] || ks[1] != qs[0] {
            return Err(shape_err("attention", format!("keys {ks:?}, values {vs:?}, query {qs:?}")));
        }
        let (t, d, dv) = (ks[0], ks[1], vs[1]);
        let inv = 1.0 / (d as f64).sqrt();
        let kv = self.value(keys);
        let qv = self.value(query);
        let sims: Vec<f64> = (0..t)
            .map(|i| kv[i * d..(i + 1) * d].iter().zip(qv).map(|(a, b)| a * b).sum::<f64>() * inv)
            .collect();
        let weights = softmax(&sims);
        let vv = self.value(values);
        let mut y = vec![0.0; dv];
        for (i, a) in weights.iter().enumerate() {
            for (yj, vj) in y.iter_mut().zip(&vv[i * dv..(i + 1) * dv]) {
                *yj += a * vj;
            }
        }
        self.push(
            "attention",
            vec![dv],
            y,
            Op::Attention {
                keys,
                values,
                query,
                weights,
            },
        )
    }

    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Selects one entry of a 1-D vector as a `[1]` node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if self.shape(x).len() != 1 || index >= xv.len() {
            return Err(shape_err("pick", format!("index {index} of {:?}", self.shape(x))));
        }
        let y = vec![xv[index]];
        self.push("pick", vec![1], y, Op::Pick { x, index })
    }

    /// Mean squared error over all entries; returns a `[1]` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) || self.value(pred).is_empty() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push("mse", vec![1], vec![loss], Op::Mse { pred, target })
    }

    /// Sign pattern of every ReLU input on the tape. Finite-difference checks
    /// use it to discard probes that straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).map(|g| g.as_slice())
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Adds this tape's parameter gradients into the store's gradient slots.
    pub fn accumulate_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(NnError::Shape {
                op: "accumulate_grads",
                detail: "backward has not run".into(),
            });
        }
        for (name, v) in &self.params {
            store.add_grad(name, &self.grads[v.0])?;
        }
        Ok(())
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(NnError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let g = &upper[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let ws = &self.nodes[w.0].shape;
                    let (out, inp) = (ws[0], ws[1]);
                    let rows = xv.len() / inp;
                    for r in 0..rows {
                        let gr = &g[r * out..(r + 1) * out];
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            lower[b.0][o] += go;
                            let wrow = &wv[o * inp..(o + 1) * inp];
                            let gw = &mut lower[w.0][o * inp..(o + 1) * inp];
                            for (gwi, xi) in gw.iter_mut().zip(xr) {
                                *gwi += go * xi;
                            }
                            let gx = &mut lower[x.0][r * inp..(r + 1) * inp];
                            for (gxi, wi) in gx.iter_mut().zip(wrow) {
                                *gxi += go * wi;
                            }
                        }
                    }
                }
                Op::Conv2d { x, k, b } => {
                    let xs = &self.nodes[x.0].shape;
                    let ks = &self.nodes[k.0].shape;
                    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
                    let xv = &self.nodes[x.0].value;
                    let kv = &self.nodes[k.0].value;
                    for o in 0..c_out {
                        for i2 in 0..h {
                            for j in 0..w {
                                let go = g[(o * h + i2) * w + j];
                                if go == 0.0 {
                                    continue;
                                }
                                lower[b.0][o] += go;
                                for c in 0..c_in {
                                    for di in 0..kh {
                                        let yi = i2 as isize + di as isize - ph;
                                        if yi < 0 || yi >= h as isize {
                                            continue;
                                        }
                                        for dj in 0..kw {
                                            let xj = j as isize + dj as isize - pw;
                                            if xj < 0 || xj >= w as isize {
                                                continue;
                                            }
                                            let ki = ((o * c_in + c) * kh + di) * kw + dj;
                                            let xi = (c * h + yi as usize) * w + xj as usize;
                                            lower[k.0][ki] += go * xv[xi];
                                            lower[x.0][xi] += go * kv[ki];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    for ((gx, &xi), &gi) in lower[x.0].iter_mut().zip(xv).zip(g) {
                        if xi > 0.0 {
                            *gx += gi;
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    for (gx, &gi) in lower[x.0].iter_mut().zip(g) {
                        *gx += gi * factor;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        for (gx, &gi) in lower[p.0].iter_mut().zip(&g[off..off + n]) {
                            *gx += gi;
                        }
                        off += n;
                    }
                }
                Op::MeanPool(x) => {
                    let xs = &self.nodes[x.0].shape;
                    let area = xs[1] * xs[2];
                    for (c, &gc) in g.iter().enumerate() {
                        let share = gc / area as f64;
                        for gx in &mut lower[x.0][c * area..(c + 1) * area] {
                            *gx += share;
                        }
                    }
                }
                Op::Tokens(x) => {
                    let xs = &self.nodes[x.0].shape;
                    let (c, area) = (xs[0], xs[1] * xs[2]);
                    for ch in 0..c {
                        for t in 0..area {
                            lower[x.0][ch * area + t] += g[t * c + ch];
                        }
                    }
                }
                Op::Reshape(x) => {
                    for (gx, &gi) in lower[x.0].iter_mut().zip(g) {
                        *gx += gi;
                    }
                }
                Op::Attention {
                    keys,
                    values,
                    query,
                    weights,
                } => {
                    let ks = &self.nodes[keys.0].shape;
                    let (t, d) = (ks[0], ks[1]);
                    let dv = self.nodes[values.0].shape[1];
                    let inv = 1.0 / (d as f64).sqrt();
                    let kv = &self.nodes[keys.0].value;
                    let vv = &self.nodes[values.0].value;
                    let qv = &self.nodes[query.0].value;
                    // d out / d weight_i = <g, value_i>
                    let da: Vec<f64> = (0..t)
                        .map(|r| vv[r * dv..(r + 1) * dv].iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    let mean_da: f64 = weights.iter().zip(&da).map(|(a, b)| a * b).sum();
                    for r in 0..t {
                        for (gv, &gi) in lower[values.0][r * dv..(r + 1) * dv].iter_mut().zip(g) {
                            *gv += weights[r] * gi;
                        }
                        let ds = weights[r] * (da[r] - mean_da) * inv;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            lower[keys.0][r * d + c] += ds * qv[c];
                            lower[query.0][c] += ds * kv[r * d + c];
                        }
                    }
                }
                Op::Pick { x, index } => {
                    lower[x.0][*index] += g[0];
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let tv = &self.nodes[target.0].value;
                    let n = pv.len() as f64;
                    for (j, (p, t)) in pv.iter().zip(tv).enumerate() {
                        let d = 2.0 * (p - t) / n * g[0];
                        lower[pred.0][j] += d;
                        lower[target.0][j] -= d;
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
