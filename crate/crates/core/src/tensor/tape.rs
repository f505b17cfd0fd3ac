//! Reverse-mode tape.
//!
//! Forward ops are evaluated eagerly and appended to the tape together with
//! whatever their backward pass needs. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid reverse topological order since
//! every node only refers to earlier nodes.

use super::conv::{self, ConvSpec};
use super::ops::{self, BatchNormSaved, LayerNormSaved, NormMode};
use super::{Dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    AvgPool(Var, usize),
    PoolRows(Var),
    PoolCols(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Upsample(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    SliceBatch(Var, usize),
    MeanChannels(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv { .. } => OpKind::Conv,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::PoolRows(_) => OpKind::PoolRows,
            Op::PoolCols(_) => OpKind::PoolCols,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Upsample(_) => OpKind::Upsample,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::ConcatBatch(_) => OpKind::ConcatBatch,
            Op::SliceBatch(..) => OpKind::SliceBatch,
            Op::MeanChannels(_) => OpKind::MeanChannels,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

/// Operation families, used to name ops in errors and for fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Reshape,
    Conv,
    AvgPool,
    PoolRows,
    PoolCols,
    BatchNorm,
    LayerNorm,
    Relu,
    Sigmoid,
    Softmax,
    Upsample,
    ConcatChannels,
    SliceChannels,
    ConcatBatch,
    SliceBatch,
    MeanChannels,
    Sum,
    CrossEntropy,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct RunningStatUpdate {
    pub running_mean: Var,
    pub running_var: Var,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    stat_updates: Vec<RunningStatUpdate>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Dims>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let dims = self.dims[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(dims, g.clone()).expect("gradient dims"),
            None => Tensor::zeros(dims),
        }
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(Option::is_some)
    }
}

impl Tape {
    /// A checked tape: every op output is tested for NaN/Inf.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
            stat_updates: Vec::new(),
            fault: None,
        }
    }

    pub fn unchecked() -> Self {
        Tape {
            checked: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the input gradients produced by every op of `kind` by 1.5.
    /// Exists so gradient checkers can be shown to catch a broken backward.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn stat_updates(&self) -> &[RunningStatUpdate] {
        &self.stat_updates
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(op.kind()),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.val(a), self.val(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.val(a), self.val(b))?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = ops::scale(self.val(x), s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.val(a), self.val(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.val(x))?;
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, dims: Dims) -> Result<Var> {
        let out = self.val(x).reshape(dims)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d(self.val(x), self.val(w), b.map(|b| self.val(b)), spec)?;
        self.push(out, Op::Conv { x, w, b, spec })
    }

    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.val(x), factor)?;
        self.push(out, Op::AvgPool(x, factor))
    }

    pub fn pool_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::pool_rows(self.val(x))?;
        self.push(out, Op::PoolRows(x))
    }

    pub fn pool_cols(&mut self, x: Var) -> Result<Var> {
        let out = ops::pool_cols(self.val(x))?;
        self.push(out, Op::PoolCols(x))
    }

    /// Batch norm. In train mode the batch statistics are also recorded as a
    /// [`RunningStatUpdate`]; running buffers themselves are left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        let (out, saved) = ops::batch_norm(
            self.val(x),
            self.val(gamma),
            self.val(beta),
            self.val(running_mean),
            self.val(running_var),
            mode,
            eps,
        )?;
        if mode == NormMode::Train {
            self.stat_updates.push(RunningStatUpdate {
                running_mean,
                running_var,
                batch_mean: saved.batch_mean.clone(),
                batch_var: saved.batch_var.clone(),
            });
        }
        self.push(out, Op::BatchNorm { x, gamma, beta, saved })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, saved) = ops::layer_norm(self.val(x), self.val(gamma), self.val(beta), eps)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, saved })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.val(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.val(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.val(x), axis)?;
        self.push(out, Op::Softmax(x, axis))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.val(x), out_h, out_w)?;
        self.push(out, Op::Upsample(x))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.val(v)).collect();
        let out = ops::concat_channels(&vals)?;
        self.push(out, Op::ConcatChannels(xs.to_vec()))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if total != self.dims(x)[1] {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {:?} sum to {total}, tensor has {} channels", sizes, self.dims(x)[1]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            let part = ops::slice_channels(self.val(x), start, len)?;
            out.push(self.push(part, Op::SliceChannels { x, start })?);
            start += len;
        }
        Ok(out)
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.val(v)).collect();
        let out = ops::concat_batch(&vals)?;
        self.push(out, Op::ConcatBatch(xs.to_vec()))
    }

    pub fn batch_item(&mut self, x: Var, n: usize) -> Result<Var> {
        if n >= self.dims(x)[0] {
            return Err(Error::shape("batch_item", format!("index {n} of {:?}", self.dims(x))));
        }
        let out = self.val(x).batch_item(n);
        self.push(out, Op::SliceBatch(x, n))
    }

    /// Mean over the channel axis: `(N, C, H, W) -> (N, 1, H, W)`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let [n, c, h, w] = t.dims();
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &t.data()[(b * c + ch) * hw..][..hw];
                for (o, v) in out[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        let out = Tensor::from_vec([n, 1, h, w], out)?;
        self.push(out, Op::MeanChannels(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Mean pixel cross-entropy against `(N, H, W)` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.val(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss is not recorded on this tape (run the forward first)".into()));
        }
        let dims = self.dims(loss);
        if dims != [1, 1, 1, 1] {
            return Err(Error::Backward(format!("loss must be scalar, got {dims:?}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions = self.node_backward(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, c) in contributions {
                accumulate(&mut grads[v.0], c);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let out_dims = node.value.dims();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, ops::reduce_to(g, out_dims, self.dims(*a))),
                (*b, ops::reduce_to(g, out_dims, self.dims(*b))),
            ],
            Op::Mul(a, b) => {
                let (ga, gb) = ops::mul_backward(self.val(*a), self.val(*b), g, out_dims);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.val(*a), self.val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let gt = Tensor::from_vec(out_dims, g.to_vec())?;
                vec![(*x, ops::transpose(&gt)?.into_data())]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Conv { x, w, b, spec } => {
                let cg = conv::conv2d_backward(self.val(*x), self.val(*w), b.is_some(), *spec, g)?;
                let mut out = vec![(*x, cg.input), (*w, cg.weight)];
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    out.push((*b, gb));
                }
                out
            }
            Op::AvgPool(x, f) => vec![(*x, ops::avg_pool2d_backward(self.dims(*x), *f, g))],
            Op::PoolRows(x) => vec![(*x, ops::pool_rows_backward(self.dims(*x), g))],
            Op::PoolCols(x) => vec![(*x, ops::pool_cols_backward(self.dims(*x), g))],
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = ops::batch_norm_backward(self.dims(*x), self.val(*gamma), saved, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = ops::layer_norm_backward(self.dims(*x), self.val(*gamma), saved, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(x) => vec![(*x, ops::relu_backward(self.val(*x), g))],
            Op::Sigmoid(x) => vec![(*x, ops::sigmoid_backward(&node.value, g))],
            Op::Softmax(x, axis) => vec![(*x, ops::softmax_backward(&node.value, *axis, g))],
            Op::Upsample(x) => vec![(
                *x,
                ops::upsample_bilinear_backward(self.dims(*x), out_dims[2], out_dims[3], g),
            )],
            Op::ConcatChannels(xs) => {
                let [n, c, h, w] = out_dims;
                let hw = h * w;
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    let xc = self.dims(*x)[1];
                    let mut gx = Vec::with_capacity(n * xc * hw);
                    for b in 0..n {
                        gx.extend_from_slice(&g[(b * c + start) * hw..(b * c + start + xc) * hw]);
                    }
                    out.push((*x, gx));
                    start += xc;
                }
                out
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.dims(*x);
                let len = out_dims[1];
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    gx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatBatch(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|x| {
                        let len = self.val(*x).len();
                        let part = g[offset..offset + len].to_vec();
                        offset += len;
                        (*x, part)
                    })
                    .collect()
            }
            Op::SliceBatch(x, n) => {
                let per = node.value.len();
                let mut gx = vec![0.0; self.val(*x).len()];
                gx[n * per..(n + 1) * per].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::MeanChannels(x) => {
                let [n, c, h, w] = self.dims(*x);
                let hw = h * w;
                let inv = 1.0 / c as f64;
                let mut gx = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    for _ in 0..c {
                        gx.extend(g[b * hw..(b + 1) * hw].iter().map(|v| v * inv));
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).len()])],
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, ops::cross_entropy_backward(probs, labels, g[0]))]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Conv,
        OpKind::AvgPool,
        OpKind::PoolRows,
        OpKind::PoolCols,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Upsample,
        OpKind::ConcatChannels,
        OpKind::SliceChannels,
        OpKind::ConcatBatch,
        OpKind::SliceBatch,
        OpKind::MeanChannels,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    /// Inverse of [`op_name`].
    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|&k| op_name(k) == name)
    }
}

pub fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Add => "add_broadcast",
        OpKind::Mul => "mul_hadamard",
        OpKind::Scale => "scale",
        OpKind::MatMul => "matmul",
        OpKind::Transpose => "transpose",
        OpKind::Reshape => "reshape",
        OpKind::Conv => "conv2d",
        OpKind::AvgPool => "avg_pool2d",
        OpKind::PoolRows => "pool_rows",
        OpKind::PoolCols => "pool_cols",
        OpKind::BatchNorm => "batch_norm",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Softmax => "softmax",
        OpKind::Upsample => "upsample_bilinear",
        OpKind::ConcatChannels => "concat_channels",
        OpKind::SliceChannels => "split_channels",
        OpKind::ConcatBatch => "concat_batch",
        OpKind::SliceBatch => "batch_item",
        OpKind::MeanChannels => "mean_channels",
        OpKind::Sum => "sum",
        OpKind::CrossEntropy => "cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(op_name(k)), Some(k));
        }
        assert_eq!(OpKind::from_name("nope"), None);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([1, 2, 3, 1], |[_, c, h, _]| (c * 3 + h) as f64));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), Tensor::ones([1, 2, 3, 1]));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn([1, 1, 2, 3], |[_, _, h, w]| h as f64 - w as f64 * 0.7);
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), ops::scale(&xt, 2.0));
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        let y = tape.leaf(Tensor::ones([1, 3, 1, 1]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(!g.reached(y));
        assert_eq!(g.get(y), Tensor::zeros([1, 3, 1, 1]));
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Backward(_))));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 1e300));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul_hadamard" }));
        let mut tape = Tape::unchecked();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 1e300));
        assert!(tape.mul(x, x).is_ok());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 3.0));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).data(), &[3.0]);
    }
}
