//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it is evaluated. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are cheap and meant
//! to be rebuilt for every episode.

mod gradcheck;
mod kernels;
mod norm;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use norm::{BatchStats, BnMode, RunningStats, BN_EPS, BN_MOMENTUM};

pub(crate) use kernels::softmax_row;
use kernels::{conv_backward, conv_forward, dense_forward, ChannelLayout, ConvGeom};

/// Floor added to the selected probability inside [`Graph::nll`].
pub const NLL_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// How 2×2 max pooling treats odd spatial extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Odd extents are a dimension error.
    Strict,
    /// The trailing odd row/column is dropped.
    Floor,
}

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    PairwiseDist { a: Var, b: Var, squared: bool },
    GroupMin { x: Var, argmin: Vec<usize> },
    GroupSum { x: Var, group: usize },
    GroupMeanRows { x: Var, group: usize },
    Scale { x: Var, c: T },
    Add(Var, Var),
    SoftmaxRows(Var),
    Nll { p: Var, labels: Vec<usize>, delta: T },
    SquaredL2(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients keyed by node; each entry has the shape of its node's value.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    /// Gradients for `vars`, in order.
    pub fn collect(&self, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        vars.iter()
            .map(|v| {
                self.get(*v)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no gradient for node {}", v.0)))
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible extents {a:?} and {b:?}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adds an input node (parameter or constant). Gradients are only
    /// computed for leaves passed to [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("dense", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(shape_err("dense bias", bs, &ws[1..]));
        }
        let (rows, inner, outer) = (xs[0], xs[1], ws[1]);
        let out = dense_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), rows, inner, outer);
        let value = Tensor::new(vec![rows, outer], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    fn pad_for(padding: Padding, k: usize) -> Result<usize> {
        match padding {
            Padding::Valid => Ok(0),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(Error::dim(format!("same padding needs an odd kernel, got {k}"))),
        }
    }

    /// Cross-correlation of `[B,C,H,W]` with `[F,C,kh,kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err("conv2d", &xs, &ks));
        }
        if xs[1] != ks[1] {
            return Err(Error::dim(format!(
                "conv2d: input channels {} != kernel channels {}",
                xs[1], ks[1]
            )));
        }
        let ph = Self::pad_for(padding, ks[2])?;
        let pw = Self::pad_for(padding, ks[3])?;
        self.conv_impl(x, k, None, [xs[0], xs[1], xs[2], xs[3]], [ks[0], ks[2], ks[3]], stride, ph, pw, true)
    }

    /// Cross-correlation of `[B,C,L]` with `[F,C,k]`, optional bias `[F]`.
    pub fn conv1d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 3 {
            return Err(shape_err("conv1d", &xs, &ks));
        }
        if xs[1] != ks[1] {
            return Err(Error::dim(format!(
                "conv1d: input channels {} != kernel channels {}",
                xs[1], ks[1]
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(shape_err("conv1d bias", self.shape(b), &ks[..1]));
            }
        }
        let pw = Self::pad_for(padding, ks[2])?;
        self.conv_impl(x, k, bias, [xs[0], xs[1], 1, xs[2]], [ks[0], 1, ks[2]], stride, 0, pw, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        [batch, channels, h, w]: [usize; 4],
        [filters, kh, kw]: [usize; 3],
        stride: usize,
        ph: usize,
        pw: usize,
        two_d: bool,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::dim("convolution stride must be positive"));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let geom = ConvGeom {
            batch,
            channels,
            h,
            w,
            filters,
            kh,
            kw,
            stride,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / stride + 1,
            ow: (w + 2 * pw - kw) / stride + 1,
        };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = conv_forward(&geom, self.value(x).data(), self.value(k).data(), bias.as_deref());
        let shape = if two_d {
            vec![batch, filters, geom.oh, geom.ow]
        } else {
            vec![batch, filters, geom.ow]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv { x, k, b, geom }))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<ChannelLayout> {
        let layout = ChannelLayout::from_shape(self.shape(x))
            .ok_or_else(|| Error::dim(format!("batch_norm needs [B,C,..], got {:?}", self.shape(x))))?;
        for p in [gamma, beta] {
            if self.shape(p) != [layout.channels] {
                return Err(shape_err("batch_norm affine", self.shape(p), &[layout.channels]));
            }
        }
        Ok(layout)
    }

    /// Batch normalization with statistics of the current batch (biased variance).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let layout = self.bn_check(x, gamma, beta)?;
        let xv = self.value(x).data();
        let n = T::lit(layout.count() as f64);
        let mut mean = vec![T::zero(); layout.channels];
        layout.for_each(|c, i| mean[c] += xv[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); layout.channels];
        layout.for_each(|c, i| {
            let d = xv[i] - mean[c];
            var[c] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(BN_EPS)).sqrt().recip()).collect();
        let v = self.bn_apply(x, gamma, beta, layout, &mean, inv_std, true);
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>) -> Result<Var> {
        let layout = self.bn_check(x, gamma, beta)?;
        if !stats.is_initialized() {
            return Err(Error::State("batch_norm eval mode with uninitialized running statistics".into()));
        }
        if stats.channels() != layout.channels {
            return Err(shape_err("batch_norm running stats", &[stats.channels()], &[layout.channels]));
        }
        let inv_std: Vec<T> = stats.var.iter().map(|&v| (v + T::lit(BN_EPS)).sqrt().recip()).collect();
        let mean = stats.mean.clone();
        Ok(self.bn_apply(x, gamma, beta, layout, &mean, inv_std, false))
    }

    /// Mode-dispatching batch norm; train mode folds the batch statistics into `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let (v, stats) = self.batch_norm_train(x, gamma, beta)?;
                state.update(&stats)?;
                Ok(v)
            }
            BnMode::Eval => self.batch_norm_eval(x, gamma, beta, state),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Var {
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        layout.for_each(|c, i| {
            xhat[i] = (xv[i] - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + b[c];
        });
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    /// 2×2, stride-2 max pooling over `[B,C,H,W]`. Gradient routes to the
    /// window maximum, ties to the lowest linear index.
    pub fn max_pool2d(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("max_pool2d needs [B,C,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if mode == PoolMode::Strict && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::dim(format!("max_pool2d: odd spatial extent {h}x{w}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("max_pool2d: spatial extent {h}x{w} below window")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for idx in [
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// Mean over all axes after the channel axis: `[B,C,...] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let layout = ChannelLayout::from_shape(self.shape(x))
            .filter(|l| self.shape(x).len() > 2 && l.spatial > 0)
            .ok_or_else(|| Error::dim(format!("global_avg_pool needs [B,C,..], got {:?}", self.shape(x))))?;
        let xv = self.value(x).data();
        let n = T::lit(layout.spatial as f64);
        let out = xv
            .chunks(layout.spatial)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(vec![layout.batch, layout.channels], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::dim(format!("slice_rows {start}..{end} of shape {s:?}")));
        }
        let width: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * width..end * width].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Distances between every row of `a: [P,D]` and every row of `b: [M,D]`,
    /// as `[P,M]`. Euclidean unless `squared`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("pairwise_dist", &sa, &sb));
        }
        let (p, m, d) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(p * m);
        for i in 0..p {
            let ar = &av[i * d..][..d];
            for j in 0..m {
                let br = &bv[j * d..][..d];
                let sq: T = ar.iter().zip(br).map(|(&x, &y)| (x - y) * (x - y)).sum();
                out.push(if squared { sq } else { sq.sqrt() });
            }
        }
        let value = Tensor::new(vec![p, m], out)?;
        Ok(self.push(value, Op::PairwiseDist { a, b, squared }))
    }

    /// Minimum over consecutive column groups of width `group`: `[P, G*group] -> [P, G]`.
    /// Ties go to the lowest column; only the winner receives gradient.
    pub fn group_min(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || s[1] % group != 0 {
            return Err(Error::dim(format!("group_min: shape {s:?} with group {group}")));
        }
        let (rows, groups) = (s[0], s[1] / group);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * groups);
        let mut argmin = Vec::with_capacity(rows * groups);
        for r in 0..rows {
            for gi in 0..groups {
                let base = r * s[1] + gi * group;
                let mut best = base;
                for idx in base + 1..base + group {
                    if xv[idx] < xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmin.push(best);
            }
        }
        let value = Tensor::new(vec![rows, groups], out)?;
        Ok(self.push(value, Op::GroupMin { x, argmin }))
    }

    /// Sum over consecutive column groups: `[P, G*group] -> [P, G]`.
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || s[1] % group != 0 {
            return Err(Error::dim(format!("group_sum: shape {s:?} with group {group}")));
        }
        let out = self
            .value(x)
            .data()
            .chunks(group)
            .map(|c| c.iter().copied().sum::<T>())
            .collect();
        let value = Tensor::new(vec![s[0], s[1] / group], out)?;
        Ok(self.push(value, Op::GroupSum { x, group }))
    }

    /// Mean over consecutive row groups: `[G*group, D] -> [G, D]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(Error::dim(format!("group_mean_rows: shape {s:?} with group {group}")));
        }
        let (groups, d) = (s[0] / group, s[1]);
        let xv = self.value(x).data();
        let n = T::lit(group as f64);
        let mut out = vec![T::zero(); groups * d];
        for gi in 0..groups {
            let o = &mut out[gi * d..][..d];
            for r in gi * group..(gi + 1) * group {
                for (acc, &v) in o.iter_mut().zip(&xv[r * d..][..d]) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(vec![groups, d], out)?;
        Ok(self.push(value, Op::GroupMeanRows { x, group }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Softmax along the last axis of a `[N]` or `[P,N]` tensor, stabilized
    /// by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s.len() > 2 {
            return Err(Error::dim(format!("softmax needs [N] or [P,N], got {s:?}")));
        }
        let n = *s.last().expect("nonempty");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Mean negative log-likelihood `−log(p[r, label_r] + δ)` over the rows of a
    /// `[N]` or `[P,N]` probability tensor, with δ = [`NLL_FLOOR`].
    pub fn nll(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.is_empty() || s.len() > 2 {
            return Err(Error::dim(format!("nll needs [N] or [P,N], got {s:?}")));
        }
        let n = *s.last().expect("nonempty");
        let rows = if s.len() == 2 { s[0] } else { 1 };
        if labels.len() != rows {
            return Err(Error::dim(format!("nll: {} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let delta = T::lit(NLL_FLOOR);
        let pv = self.value(p).data();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(pv[r * n + l] + delta).ln())
            .sum();
        let value = Tensor::scalar(total / T::lit(rows as f64));
        Ok(self.push(value, Op::Nll { p, labels: labels.to_vec(), delta }))
    }

    /// `Σ (a − b)²` over equally shaped tensors.
    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("squared_l2", self.shape(a), self.shape(b)));
        }
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SquaredL2(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    fn inputs(op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Conv { x, k, b, .. } => {
                let mut v = vec![*x, *k];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::MaxPool2d { x, .. }
            | Op::SliceRows { x, .. }
            | Op::GroupMin { x, .. }
            | Op::GroupSum { x, .. }
            | Op::GroupMeanRows { x, .. }
            | Op::Scale { x, .. } => vec![*x],
            Op::Nll { p, .. } => vec![*p],
            Op::PairwiseDist { a, b, .. } | Op::Add(a, b) | Op::SquaredL2(a, b) => vec![*a, *b],
        }
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    /// Nodes in `wrt` that do not influence `loss` receive zero tensors.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<GradientMap<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut needs = vec![false; end];
        for v in wrt {
            if v.0 < end {
                needs[v.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] {
                needs[i] = Self::inputs(&self.nodes[i].op).iter().any(|v| needs[v.0]);
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        let mut out = BTreeMap::new();
        if needs[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let wanted: std::collections::BTreeSet<Var> = wrt.iter().copied().collect();
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if wanted.contains(&Var(i)) {
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g.clone())?);
            }
            self.propagate(node, &g, &needs, &mut grads);
        }
        for v in wrt {
            out.entry(*v)
                .or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        Ok(GradientMap { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], needs: &[bool], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (rows, inner) = (shape(*x)[0], shape(*x)[1]);
                let outer = shape(*w)[1];
                if needs[x.0] {
                    let wv = val(*w);
                    let mut dx = vec![T::zero(); rows * inner];
                    for r in 0..rows {
                        let grow = &g[r * outer..][..outer];
                        for i in 0..inner {
                            dx[r * inner + i] =
                                wv[i * outer..][..outer].iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    acc(*x, dx);
                }
                if needs[w.0] {
                    let xv = val(*x);
                    let mut dw = vec![T::zero(); inner * outer];
                    for r in 0..rows {
                        let grow = &g[r * outer..][..outer];
                        for i in 0..inner {
                            let xval = xv[r * inner + i];
                            for (d, &gv) in dw[i * outer..][..outer].iter_mut().zip(grow) {
                                *d += xval * gv;
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if needs[b.0] {
                    let mut db = vec![T::zero(); outer];
                    for grow in g.chunks(outer) {
                        db.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                    }
                    acc(*b, db);
                }
            }
            Op::Conv { x, k, b, geom } => {
                let want_b = b.map(|b| needs[b.0]).unwrap_or(false);
                let (dx, dk, db) = conv_backward(geom, val(*x), val(*k), g, needs[x.0], needs[k.0], want_b);
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dk) = dk {
                    acc(*k, dk);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    acc(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let layout = ChannelLayout::from_shape(shape(*x)).expect("checked in forward");
                let gam = val(*gamma);
                if needs[gamma.0] || needs[beta.0] {
                    let mut dg = vec![T::zero(); layout.channels];
                    let mut db = vec![T::zero(); layout.channels];
                    layout.for_each(|c, i| {
                        dg[c] += g[i] * xhat[i];
                        db[c] += g[i];
                    });
                    if needs[gamma.0] {
                        acc(*gamma, dg);
                    }
                    if needs[beta.0] {
                        acc(*beta, db);
                    }
                }
                if needs[x.0] {
                    let mut dx = vec![T::zero(); g.len()];
                    if *train {
                        let n = T::lit(layout.count() as f64);
                        let mut sum_d = vec![T::zero(); layout.channels];
                        let mut sum_dx = vec![T::zero(); layout.channels];
                        layout.for_each(|c, i| {
                            let d = g[i] * gam[c];
                            sum_d[c] += d;
                            sum_dx[c] += d * xhat[i];
                        });
                        layout.for_each(|c, i| {
                            let d = g[i] * gam[c];
                            dx[i] = inv_std[c] / n * (n * d - sum_d[c] - xhat[i] * sum_dx[c]);
                        });
                    } else {
                        layout.for_each(|c, i| dx[i] = g[i] * gam[c] * inv_std[c]);
                    }
                    acc(*x, dx);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let layout = ChannelLayout::from_shape(shape(*x)).expect("checked in forward");
                let n = T::lit(layout.spatial as f64);
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / n, layout.spatial))
                    .collect();
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SliceRows { x, start } => {
                let s = shape(*x);
                let width: usize = s[1..].iter().product();
                let mut dx = vec![T::zero(); val(*x).len()];
                dx[start * width..start * width + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::PairwiseDist { a, b, squared } => {
                let (p, d) = (shape(*a)[0], shape(*a)[1]);
                let m = shape(*b)[0];
                let (av, bv) = (val(*a), val(*b));
                let dist = node.value.data();
                let mut da = vec![T::zero(); p * d];
                let mut db = vec![T::zero(); m * d];
                let two = T::lit(2.0);
                for i in 0..p {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == T::zero() {
                            continue;
                        }
                        let coef = if *squared {
                            two * gv
                        } else if dist[i * m + j] > T::zero() {
                            gv / dist[i * m + j]
                        } else {
                            T::zero()
                        };
                        for k in 0..d {
                            let diff = (av[i * d + k] - bv[j * d + k]) * coef;
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                if needs[a.0] {
                    acc(*a, da);
                }
                if needs[b.0] {
                    acc(*b, db);
                }
            }
            Op::GroupMin { x, argmin } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&idx, &gv) in argmin.iter().zip(g) {
                    dx[idx] += gv;
                }
                acc(*x, dx);
            }
            Op::GroupSum { x, group } => {
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, *group)).collect();
                acc(*x, dx);
            }
            Op::GroupMeanRows { x, group } => {
                let d = shape(*x)[1];
                let n = T::lit(*group as f64);
                let mut dx = Vec::with_capacity(val(*x).len());
                for grow in g.chunks(d) {
                    for _ in 0..*group {
                        dx.extend(grow.iter().map(|&gv| gv / n));
                    }
                }
                acc(*x, dx);
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|&gv| gv * *c).collect()),
            Op::Add(a, b) => {
                if needs[a.0] {
                    acc(*a, g.to_vec());
                }
                if needs[b.0] {
                    acc(*b, g.to_vec());
                }
            }
            Op::SoftmaxRows(x) => {
                let n = *node.value.shape().last().expect("nonempty");
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Nll { p, labels, delta } => {
                let n = *shape(*p).last().expect("nonempty");
                let pv = val(*p);
                let rows = T::lit(labels.len() as f64);
                let mut dp = vec![T::zero(); pv.len()];
                for (r, &l) in labels.iter().enumerate() {
                    dp[r * n + l] = -g[0] / (rows * (pv[r * n + l] + *delta));
                }
                acc(*p, dp);
            }
            Op::SquaredL2(a, b) => {
                let two = T::lit(2.0) * g[0];
                let diff: Vec<T> = val(*a).iter().zip(val(*b)).map(|(&x, &y)| two * (x - y)).collect();
                if needs[b.0] {
                    acc(*b, diff.iter().map(|&d| -d).collect());
                }
                if needs[a.0] {
                    acc(*a, diff);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
        }
    }
}
