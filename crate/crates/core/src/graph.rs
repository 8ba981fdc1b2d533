//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every op applied during one
//! forward pass and replays them backwards in [`Graph::backward`]. Graphs are
//! single-use: build one per forward pass and drop it before mutating the
//! store.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Axis, Zip};

use crate::error::{shape_err, Result};
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::tensor::{self, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and record running-stat updates.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Param(String),
    Conv { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, arg: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, mean: Vec<f64>, inv_std: Vec<f64> },
    Resize(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Crop { x: Var, top: usize, left: usize },
    GlobalAvg(Var),
    GlobalMax { x: Var, arg: Vec<usize> },
    PairSoftmax(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Self { store, mode, nodes: Vec::new(), params: HashMap::new(), bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        let d = self.value(v).dim();
        [d.0, d.1, d.2, d.3]
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Store entry as a leaf. Only trainable entries collect gradients.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let entry = self.store.entry(name)?;
        let ng = entry.kind == ParamKind::Trainable;
        let v = self.push_arc(entry.value.clone(), Op::Param(name.to_string()), ng);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b }, ng))
    }

    /// Convolution with `{prefix}.weight` and, if present, `{prefix}.bias`.
    pub fn conv_named(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) { Some(self.param(&bias_name)?) } else { None };
        self.conv(x, w, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = tensor::max_pool2(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxPool { x, arg }, ng))
    }

    /// Batch normalization with `{prefix}.gamma/beta` and running statistics
    /// `{prefix}.running_mean/running_var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        if self.value(gamma).len() != c {
            return shape_err(format!("batch norm `{prefix}` has {} channels, input has {c}", self.value(gamma).len()));
        }
        let m = (n * h * w) as f64;
        let mut update = None;
        let (mean, var): (Vec<f64>, Vec<f64>) = match self.mode {
            Mode::Train => {
                let (means, vars) = batch_stats(xv);
                let unbiased = vars.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
                update = Some(BnUpdate { prefix: prefix.to_string(), mean: means.clone(), var_unbiased: unbiased });
                (means, vars)
            }
            Mode::Eval => {
                let rm = self.store.tensor(&format!("{prefix}.running_mean"))?;
                let rv = self.store.tensor(&format!("{prefix}.running_var"))?;
                (rm.iter().copied().collect(), rv.iter().copied().collect())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, out) = bn_apply(xv, &mean, &inv_std, self.value(gamma), self.value(beta));
        self.bn_updates.extend(update);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, mean, inv_std }, ng))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let [_, _, ih, iw] = self.shape(x);
        if (ih, iw) == (h, w) {
            return x;
        }
        let out = tensor::resize_bilinear(self.value(x), h, w);
        let ng = self.ng(x);
        self.push(out, Op::Resize(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x) * k;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return shape_err(format!("cannot concatenate {sa:?} with {sb:?}"));
        }
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("checked shapes");
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    /// Spatial window of size (h, w) starting at (top, left).
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let [_, _, ih, iw] = self.shape(x);
        if top + h > ih || left + w > iw {
            return shape_err(format!("crop {h}x{w}@({top},{left}) exceeds {ih}x{iw}"));
        }
        let out = self.value(x).slice(s![.., .., top..top + h, left..left + w]).to_owned();
        let ng = self.ng(x);
        Ok(self.push(out, Op::Crop { x, top, left }, ng))
    }

    pub fn global_avg(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let area = (h * w) as f64;
        let out = Tensor::from_shape_fn((n, c, 1, 1), |(b, ch, _, _)| xv.slice(s![b, ch, .., ..]).sum() / area);
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvg(x), ng)
    }

    pub fn global_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, _, w) = xv.dim();
        let mut out = Tensor::zeros((n, c, 1, 1));
        let mut arg = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let plane = xv.slice(s![b, ch, .., ..]);
                let mut best = (0, 0);
                for ((y, xx), v) in plane.indexed_iter() {
                    if *v > plane[best] {
                        best = (y, xx);
                    }
                }
                out[[b, ch, 0, 0]] = plane[best];
                arg.push(best.0 * w + best.1);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::GlobalMax { x, arg }, ng)
    }

    /// First component of the elementwise two-way softmax: e^a / (e^a + e^b).
    pub fn pair_softmax(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("softmax operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        Zip::from(&mut out).and(self.value(b)).for_each(|o, &y| *o = pair_softmax(*o, y));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::PairSoftmax(a, b), ng))
    }

    /// Running-statistic updates recorded by training-mode batch norm.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Back-propagate the given output gradients and return gradients for
    /// every trainable parameter reached.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        let mut out = Gradients::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::Conv { x, w, b } => {
                    let (dx, dw, db) = tensor::conv2d_backward(self.value(*x), self.value(*w), &g, self.ng(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    self.acc_if(&mut grads, *w, dw);
                    if let Some(b) = b {
                        self.acc_if(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*node.value).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *x, d);
                }
                Op::MaxPool { x, arg } => {
                    let [n, c, h, w] = self.shape(*x);
                    let mut d = Tensor::zeros((n, c, h, w));
                    let (_, _, oh, ow) = g.dim();
                    let mut it = arg.iter();
                    for b in 0..n {
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let idx = *it.next().expect("argmax per cell");
                                    d[[b, ch, idx / w, idx % w]] += g[[b, ch, oy, ox]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, .. } => {
                    let (n, c, h, w) = g.dim();
                    let m = (n * h * w) as f64;
                    let gv = self.value(*gamma);
                    let mut dgamma = Tensor::zeros((1, c, 1, 1));
                    let mut dbeta = Tensor::zeros((1, c, 1, 1));
                    let mut dx = Tensor::zeros((n, c, h, w));
                    for ch in 0..c {
                        let gc = g.slice(s![.., ch, .., ..]);
                        let xc = xhat.slice(s![.., ch, .., ..]);
                        let sum_g = gc.sum();
                        let sum_gx = Zip::from(&gc).and(&xc).fold(0.0, |acc, a, b| acc + a * b);
                        dgamma[[0, ch, 0, 0]] = sum_gx;
                        dbeta[[0, ch, 0, 0]] = sum_g;
                        let scale = gv[[0, ch, 0, 0]] * inv_std[ch];
                        let mut dxc = dx.slice_mut(s![.., ch, .., ..]);
                        match self.mode {
                            Mode::Train => Zip::from(&mut dxc).and(&gc).and(&xc).for_each(|d, &gg, &xh| {
                                *d = scale * (gg - sum_g / m - xh * sum_gx / m);
                            }),
                            Mode::Eval => Zip::from(&mut dxc).and(&gc).for_each(|d, &gg| *d = scale * gg),
                        }
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    self.acc_if(&mut grads, *gamma, dgamma);
                    self.acc_if(&mut grads, *beta, dbeta);
                }
                Op::Resize(x) => {
                    let [_, _, h, w] = self.shape(*x);
                    accumulate(&mut grads, *x, tensor::resize_bilinear_backward(&g, h, w));
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *a, tensor::sum_to_shape(&g, self.shape(*a)));
                    self.acc_if(&mut grads, *b, tensor::sum_to_shape(&g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let d = tensor::broadcast_zip(&g, self.value(*b), |x, y| x * y).expect("forward shapes");
                        accumulate(&mut grads, *a, tensor::sum_to_shape(&d, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        let d = tensor::broadcast_zip(&g, self.value(*a), |x, y| x * y).expect("forward shapes");
                        accumulate(&mut grads, *b, tensor::sum_to_shape(&d, self.shape(*b)));
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::Concat(a, b) => {
                    let ca = self.shape(*a)[1];
                    self.acc_if(&mut grads, *a, g.slice(s![.., ..ca, .., ..]).to_owned());
                    self.acc_if(&mut grads, *b, g.slice(s![.., ca.., .., ..]).to_owned());
                }
                Op::Crop { x, top, left } => {
                    let mut d = Tensor::zeros(self.shape(*x));
                    let (_, _, h, w) = g.dim();
                    d.slice_mut(s![.., .., *top..*top + h, *left..*left + w]).assign(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::GlobalAvg(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let area = (h * w) as f64;
                    let d = Tensor::from_shape_fn((n, c, h, w), |(b, ch, _, _)| g[[b, ch, 0, 0]] / area);
                    accumulate(&mut grads, *x, d);
                }
                Op::GlobalMax { x, arg } => {
                    let [n, c, h, w] = self.shape(*x);
                    let mut d = Tensor::zeros((n, c, h, w));
                    for b in 0..n {
                        for ch in 0..c {
                            let idx = arg[b * c + ch];
                            d[[b, ch, idx / w, idx % w]] = g[[b, ch, 0, 0]];
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::PairSoftmax(a, b) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, -&d);
                    }
                    self.acc_if(&mut grads, *a, d);
                }
            }
        }
        out
    }

    /// Values of `outputs` after replacing parameter `name` with `value`.
    /// Only nodes downstream of the parameter are recomputed; this is meant
    /// for finite-difference checks.
    pub fn replay(&self, name: &str, value: Tensor, outputs: &[Var]) -> Result<Vec<Tensor>> {
        let Some(start) = self.params.get(name) else {
            return Ok(outputs.iter().map(|v| self.value(*v).clone()).collect());
        };
        let mut fresh: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        fresh[start.0] = Some(value);
        for i in start.0 + 1..self.nodes.len() {
            if op_inputs(&self.nodes[i].op).iter().any(|v| fresh[v.0].is_some()) {
                let get = |v: &Var| fresh[v.0].as_ref().unwrap_or_else(|| self.value(*v));
                let out = self.eval_op(i, get)?;
                fresh[i] = Some(out);
            }
        }
        Ok(outputs.iter().map(|v| fresh[v.0].clone().unwrap_or_else(|| self.value(*v).clone())).collect())
    }

    fn eval_op<'a>(&'a self, i: usize, get: impl Fn(&Var) -> &'a Tensor) -> Result<Tensor> {
        let (_, _, oh, ow) = self.nodes[i].value.dim();
        Ok(match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves have no inputs"),
            Op::Conv { x, w, b } => tensor::conv2d(get(x), get(w), b.as_ref().map(&get))?,
            Op::Relu(x) => get(x).mapv(|v| v.max(0.0)),
            Op::Sigmoid(x) => get(x).mapv(sigmoid),
            Op::MaxPool { x, .. } => tensor::max_pool2(get(x))?.0,
            Op::BatchNorm { x, gamma, beta, mean, inv_std, .. } => {
                let xv = get(x);
                let (mean, inv_std) = match self.mode {
                    Mode::Eval => (mean.clone(), inv_std.clone()),
                    Mode::Train => {
                        let (m, v) = batch_stats(xv);
                        (m, v.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())
                    }
                };
                bn_apply(xv, &mean, &inv_std, get(gamma), get(beta)).1
            }
            Op::Resize(x) => tensor::resize_bilinear(get(x), oh, ow),
            Op::Add(a, b) => tensor::broadcast_zip(get(a), get(b), |x, y| x + y)?,
            Op::Mul(a, b) => tensor::broadcast_zip(get(a), get(b), |x, y| x * y)?,
            Op::Scale(x, k) => get(x) * *k,
            Op::Concat(a, b) => ndarray::concatenate(Axis(1), &[get(a).view(), get(b).view()]).expect("forward shapes"),
            Op::Crop { x, top, left } => {
                get(x).slice(s![.., .., *top..*top + oh, *left..*left + ow]).to_owned()
            }
            Op::GlobalAvg(x) => {
                let xv = get(x);
                let (n, c, h, w) = xv.dim();
                Tensor::from_shape_fn((n, c, 1, 1), |(b, ch, _, _)| xv.slice(s![b, ch, .., ..]).sum() / (h * w) as f64)
            }
            Op::GlobalMax { x, .. } => {
                let xv = get(x);
                let (n, c, _, _) = xv.dim();
                Tensor::from_shape_fn((n, c, 1, 1), |(b, ch, _, _)| {
                    xv.slice(s![b, ch, .., ..]).fold(f64::NEG_INFINITY, |m, v| m.max(*v))
                })
            }
            Op::PairSoftmax(a, b) => {
                let mut out = get(a).clone();
                Zip::from(&mut out).and(get(b)).for_each(|o, &y| *o = pair_softmax(*o, y));
                out
            }
        })
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.ng(v) {
            accumulate(grads, v, g);
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Conv { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Relu(x) | Op::Sigmoid(x) | Op::Resize(x) | Op::Scale(x, _) | Op::GlobalAvg(x) => vec![*x],
        Op::MaxPool { x, .. } | Op::Crop { x, .. } | Op::GlobalMax { x, .. } => vec![*x],
        Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) | Op::PairSoftmax(a, b) => vec![*a, *b],
    }
}

/// Per-channel mean and biased variance over (N, H, W).
fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    (0..c)
        .map(|ch| {
            let plane = x.slice(s![.., ch, .., ..]);
            let mu = plane.sum() / m;
            (mu, plane.fold(0.0, |acc, v| acc + (v - mu) * (v - mu)) / m)
        })
        .unzip()
}

/// Returns `(xhat, gamma·xhat + beta)`.
fn bn_apply(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor) {
    let mut xhat = x.clone();
    let mut out = x.clone();
    for ch in 0..mean.len() {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let (g, b) = (gamma[[0, ch, 0, 0]], beta[[0, ch, 0, 0]]);
        xhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - mu) * is);
        out.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| g * ((v - mu) * is) + b);
    }
    (xhat, out)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// e^a / (e^a + e^b), evaluated after subtracting max(a, b).
pub fn pair_softmax(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    ea / (ea + eb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::channel_vec;

    fn scalar_loss(g: &Graph, v: Var) -> (f64, Tensor) {
        // L = 0.5 * sum(y^2)
        let y = g.value(v);
        (0.5 * y.mapv(|a| a * a).sum(), y.clone())
    }

    #[test]
    fn batch_norm_gradient_matches_finite_difference() {
        let mut store = ParamStore::new();
        store.insert("bn.gamma", ParamKind::Trainable, Tensor::from_shape_vec((1, 2, 1, 1), vec![1.3, 0.7]).unwrap());
        store.insert("bn.beta", ParamKind::Trainable, channel_vec(2, 0.1));
        store.insert("w", ParamKind::Trainable, Tensor::from_shape_fn((2, 2, 1, 1), |(o, i, _, _)| 0.3 + o as f64 - 0.5 * i as f64));
        let x = Tensor::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) as f64).sin());
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store, Mode::Train);
            let xi = g.input(x.clone());
            let w = g.param("w").unwrap();
            let y = g.conv(xi, w, None).unwrap();
            let y = g.batch_norm(y, "bn").unwrap();
            let y = g.mul(y, y).unwrap();
            let (l, seed) = scalar_loss(&g, y);
            (l, g.backward(&[(y, seed)]))
        };
        let (_, grads) = run(&store);
        for name in ["w", "bn.gamma", "bn.beta"] {
            let n = store.tensor(name).unwrap().len();
            for i in 0..n {
                let h = 1e-6;
                let mut sp = store.clone();
                sp.tensor_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
                let mut sm = store.clone();
                sm.tensor_mut(name).unwrap().as_slice_mut().unwrap()[i] -= h;
                let fd = (run(&sp).0 - run(&sm).0) / (2.0 * h);
                let an = grads[name].as_slice().unwrap()[i];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{name}[{i}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn replay_matches_rebuild() {
        let mut store = ParamStore::new();
        store.insert("bn.gamma", ParamKind::Trainable, channel_vec(2, 0.9));
        store.insert("bn.beta", ParamKind::Trainable, channel_vec(2, 0.1));
        store.insert("w", ParamKind::Trainable, Tensor::from_shape_fn((2, 2, 3, 3), |(o, i, a, b)| ((o + 2 * i + a * b) as f64).cos()));
        let x = Tensor::from_shape_fn((1, 2, 4, 4), |(_, b, c, d)| ((b * 5 + c * 3 + d) as f64).sin());
        fn build<'a>(store: &'a ParamStore, mode: Mode, x: &Tensor) -> (Graph<'a>, Var) {
            let mut g = Graph::new(store, mode);
            let xi = g.input(x.clone());
            let w = g.param("w").unwrap();
            let y = g.conv(xi, w, None).unwrap();
            let y = g.batch_norm(y, "bn").unwrap();
            let y = g.relu(y);
            let p = g.max_pool2(y).unwrap();
            let p = g.resize(p, 4, 4);
            let m = g.global_max(y);
            let a = g.global_avg(y);
            let s = g.pair_softmax(m, a).unwrap();
            let z = g.mul(p, s).unwrap();
            let z = g.concat(z, y).unwrap();
            let z = g.crop(z, 1, 1, 2, 3).unwrap();
            let out = g.sigmoid(z);
            (g, out)
        }
        store.insert("bn.running_mean", ParamKind::Buffer, channel_vec(2, 0.2));
        store.insert("bn.running_var", ParamKind::Buffer, channel_vec(2, 1.5));
        for mode in [Mode::Train, Mode::Eval] {
            let (g, out) = build(&store, mode, &x);
            let mut changed = store.clone();
            changed.tensor_mut("w").unwrap()[[1, 0, 2, 1]] += 0.3;
            changed.tensor_mut("bn.gamma").unwrap()[[0, 1, 0, 0]] = 1.0;
            let (g2, out2) = build(&changed, mode, &x);
            let mut staged = store.clone();
            staged.tensor_mut("w").unwrap()[[1, 0, 2, 1]] += 0.3;
            let (g3, out3) = build(&staged, mode, &x);
            let via_replay = g.replay("w", changed.tensor("w").unwrap().clone(), &[out]).unwrap();
            assert_eq!(via_replay[0], *g3.value(out3));
            let via_replay = g3.replay("bn.gamma", changed.tensor("bn.gamma").unwrap().clone(), &[out3]).unwrap();
            assert_eq!(via_replay[0], *g2.value(out2));
        }
    }

    #[test]
    fn pair_softmax_is_stable() {
        assert_eq!(pair_softmax(1000.0, 0.0), 1.0);
        assert_eq!(pair_softmax(0.0, 1000.0), 0.0);
        assert!((pair_softmax(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
    }
}
