//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order, so [`Graph::backward`] is a single reverse
//! sweep. Gradients are accumulated on leaves that were created with
//! gradient tracking enabled.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::conv::{conv_backward, conv_forward, ConvSpec};
use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// `Spatial` reduces every axis after the channel axis (`[C, ...] -> [C]`);
/// `Channel` reduces the channel axis (`[C, ...] -> [1, ...]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxes {
    Spatial,
    Channel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv,
    Add,
    Mul,
    BiasAdd,
    ScaleChannels,
    ScaleSpatial,
    Concat,
    Relu,
    Sigmoid,
    Softmax,
    Pool(PoolKind, PoolAxes),
    MatVec,
    Upsample,
    Scatter,
    CrossEntropy,
    Sum,
    WeightedSum,
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub kind: OpKind,
    /// `/`-joined scope path active when the operation was recorded.
    pub scope: String,
}

/// A user-defined differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input (`None` when the input needs none).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Weighted many-to-one map from source positions to destination positions,
/// applied independently per channel. Sources without a target are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPlan {
    dst_spatial: Vec<usize>,
    targets: Vec<Option<usize>>,
    weights: Vec<f64>,
}

impl ScatterPlan {
    pub fn new(dst_spatial: Vec<usize>, targets: Vec<Option<usize>>, weights: Vec<f64>) -> Result<Self> {
        let dst_len: usize = dst_spatial.iter().product();
        ensure!(
            targets.len() == weights.len(),
            "scatter plan has {} targets but {} weights",
            targets.len(),
            weights.len()
        );
        for (p, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                ensure!(*t < dst_len, "scatter target {t} of source {p} is out of range {dst_len}");
            }
        }
        Ok(Self {
            dst_spatial,
            targets,
            weights,
        })
    }

    /// Each destination receives the mean of the sources mapped onto it.
    pub fn averaging(dst_spatial: Vec<usize>, targets: Vec<Option<usize>>) -> Result<Self> {
        let dst_len: usize = dst_spatial.iter().product();
        let mut counts = vec![0usize; dst_len];
        for t in targets.iter().flatten() {
            ensure!(*t < dst_len, "scatter target {t} is out of range {dst_len}");
            counts[*t] += 1;
        }
        let weights = targets
            .iter()
            .map(|t| t.map_or(0.0, |t| 1.0 / counts[t] as f64))
            .collect();
        Self::new(dst_spatial, targets, weights)
    }

    pub fn src_len(&self) -> usize {
        self.targets.len()
    }

    pub fn dst_len(&self) -> usize {
        self.dst_spatial.iter().product()
    }

    pub fn dst_spatial(&self) -> &[usize] {
        &self.dst_spatial
    }

    pub fn targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `[C, src...] -> [C, dst...]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        ensure!(
            x.spatial_len() == self.src_len(),
            "scatter input has {} positions, plan expects {}",
            x.spatial_len(),
            self.src_len()
        );
        let c = x.channels();
        let (src, dst) = (self.src_len(), self.dst_len());
        let mut out = vec![0.0; c * dst];
        for ch in 0..c {
            let xs = &x.data()[ch * src..(ch + 1) * src];
            let os = &mut out[ch * dst..(ch + 1) * dst];
            for (p, t) in self.targets.iter().enumerate() {
                if let Some(t) = t {
                    os[*t] += self.weights[p] * xs[p];
                }
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&self.dst_spatial);
        Tensor::new(shape, out)
    }

    /// Adjoint of [`apply`](Self::apply): each source receives its target's
    /// value scaled by its weight; untargeted sources receive zero.
    pub fn adjoint(&self, y: &[f64], channels: usize) -> Result<Vec<f64>> {
        let (src, dst) = (self.src_len(), self.dst_len());
        ensure!(
            y.len() == channels * dst,
            "adjoint input has {} values, expected {}",
            y.len(),
            channels * dst
        );
        let mut out = vec![0.0; channels * src];
        for ch in 0..channels {
            let ys = &y[ch * dst..(ch + 1) * dst];
            let os = &mut out[ch * src..(ch + 1) * src];
            for (p, t) in self.targets.iter().enumerate() {
                if let Some(t) = t {
                    os[p] = self.weights[p] * ys[*t];
                }
            }
        }
        Ok(out)
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Mul(Var, Var),
    BiasAdd {
        x: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        w: Var,
    },
    ScaleSpatial {
        x: Var,
        s: Var,
    },
    Concat(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Pool {
        x: Var,
        kind: PoolKind,
        axes: PoolAxes,
        argmax: Vec<usize>,
    },
    MatVec {
        w: Var,
        x: Var,
    },
    Upsample {
        x: Var,
        factors: Vec<usize>,
    },
    Scatter {
        x: Var,
        plan: Arc<ScatterPlan>,
    },
    CrossEntropy {
        probs: Var,
        /// (flat spatial position, target channel) of every counted location.
        targets: Vec<(usize, usize)>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::ScaleSpatial { .. } => OpKind::ScaleSpatial,
            Op::Concat(_) => OpKind::Concat,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Pool { kind, axes, .. } => OpKind::Pool(*kind, *axes),
            Op::MatVec { .. } => OpKind::MatVec,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Scatter { .. } => OpKind::Scatter,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Custom { op, .. } => OpKind::Custom(op.name().to_string()),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: String,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scopes: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scopes.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    /// Every recorded operation other than leaves, in recording order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| TraceEntry {
                kind: n.op.kind(),
                scope: n.scope.clone(),
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scopes.join("/"),
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = self.tracked(parents);
        self.push(value, op, rg)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(
            out,
            Op::Conv {
                x,
                w,
                b,
                spec: spec.clone(),
            },
            &parents,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "{what}: shapes {:?} and {:?} differ",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[c, ...] + b[c]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        ensure!(
            vb.shape() == [vx.channels()],
            "bias shape {:?} does not match {} channels",
            vb.shape(),
            vx.channels()
        );
        let s = vx.spatial_len();
        let mut data = vx.data().to_vec();
        for (c, row) in data.chunks_mut(s).enumerate() {
            row.iter_mut().for_each(|v| *v += vb.data()[c]);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, Op::BiasAdd { x, b }, &[x, b]))
    }

    /// `x[c, ...] * w[c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        ensure!(
            vw.shape() == [vx.channels()],
            "channel weights {:?} do not match {} channels",
            vw.shape(),
            vx.channels()
        );
        let s = vx.spatial_len();
        let mut data = vx.data().to_vec();
        for (c, row) in data.chunks_mut(s).enumerate() {
            row.iter_mut().for_each(|v| *v *= vw.data()[c]);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, Op::ScaleChannels { x, w }, &[x, w]))
    }

    /// `x[c, p] * s[0, p]`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        ensure!(
            vs.channels() == 1 && vs.spatial() == vx.spatial(),
            "spatial weights {:?} do not match input {:?}",
            vs.shape(),
            vx.shape()
        );
        let n = vx.spatial_len();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(vs.data()).for_each(|(v, w)| *v *= w);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, Op::ScaleSpatial { x, s }, &[x, s]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat of zero tensors");
        let spatial = self.value(xs[0]).spatial().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            ensure!(
                v.spatial() == spatial.as_slice(),
                "concat: spatial extents {:?} and {:?} differ",
                v.spatial(),
                spatial
            );
            channels += v.channels();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![channels];
        shape.extend(spatial);
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::Concat(xs.to_vec()), xs))
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.record(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Softmax over the channel axis at every spatial position.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = softmax_channels(v);
        self.record(out, Op::Softmax(x), &[x])
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, axes: PoolAxes) -> Result<Var> {
        let v = self.value(x);
        ensure!(v.numel() > 0, "pool of an empty tensor");
        let (c, s) = (v.channels(), v.spatial_len());
        let d = v.data();
        let mut argmax = Vec::new();
        let (shape, data) = match axes {
            PoolAxes::Spatial => {
                let mut out = Vec::with_capacity(c);
                for row in d.chunks(s) {
                    match kind {
                        PoolKind::Avg => out.push(row.iter().sum::<f64>() / s as f64),
                        PoolKind::Max => {
                            let (i, m) = first_argmax(row.iter().copied());
                            argmax.push(i);
                            out.push(m);
                        }
                    }
                }
                (vec![c], out)
            }
            PoolAxes::Channel => {
                let mut out = Vec::with_capacity(s);
                for p in 0..s {
                    let column = (0..c).map(|ch| d[ch * s + p]);
                    match kind {
                        PoolKind::Avg => out.push(column.sum::<f64>() / c as f64),
                        PoolKind::Max => {
                            let (i, m) = first_argmax(column);
                            argmax.push(i);
                            out.push(m);
                        }
                    }
                }
                let mut shape = vec![1];
                shape.extend_from_slice(v.spatial());
                (shape, out)
            }
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            out,
            Op::Pool {
                x,
                kind,
                axes,
                argmax,
            },
            &[x],
        ))
    }

    /// `w[out, in] * x[in]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(w), self.value(x));
        ensure!(
            vw.shape().len() == 2 && vx.shape().len() == 1 && vw.shape()[1] == vx.shape()[0],
            "matvec: matrix {:?} and vector {:?} are incompatible",
            vw.shape(),
            vx.shape()
        );
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        let data: Vec<f64> = (0..m)
            .map(|r| {
                vw.data()[r * n..(r + 1) * n]
                    .iter()
                    .zip(vx.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.record(out, Op::MatVec { w, x }, &[w, x]))
    }

    /// Nearest-neighbour upsampling by an integer factor per spatial axis.
    pub fn upsample(&mut self, x: Var, factors: &[usize]) -> Result<Var> {
        let v = self.value(x);
        ensure!(
            factors.len() == v.spatial().len() && factors.iter().all(|&f| f > 0),
            "upsample factors {:?} do not fit input {:?}",
            factors,
            v.shape()
        );
        let out_shape: Vec<usize> = std::iter::once(v.channels())
            .chain(v.spatial().iter().zip(factors).map(|(a, f)| a * f))
            .collect();
        let in_strides = super::strides(v.shape());
        let out_len: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(out_len);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..out_len {
            let mut src = idx[0] * in_strides[0];
            for a in 1..idx.len() {
                src += (idx[a] / factors[a - 1]) * in_strides[a];
            }
            data.push(v.data()[src]);
            increment(&mut idx, &out_shape);
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(
            out,
            Op::Upsample {
                x,
                factors: factors.to_vec(),
            },
            &[x],
        ))
    }

    pub fn scatter(&mut self, x: Var, plan: Arc<ScatterPlan>) -> Result<Var> {
        let out = plan.apply(self.value(x))?;
        Ok(self.record(out, Op::Scatter { x, plan }, &[x]))
    }

    /// Mean negative log-probability of `labels` over positions where `mask`
    /// is set. `probs` is `[K, ...]`; `labels` and `mask` cover the spatial
    /// positions.
    pub fn masked_cross_entropy(&mut self, probs: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
        let v = self.value(probs);
        let (k, s) = (v.channels(), v.spatial_len());
        ensure!(
            labels.len() == s && mask.len() == s,
            "cross-entropy: {} labels and {} mask entries for {} positions",
            labels.len(),
            mask.len(),
            s
        );
        let mut targets = Vec::new();
        for (p, (&l, &m)) in labels.iter().zip(mask).enumerate() {
            if m {
                ensure!(
                    (l as usize) < k,
                    "cross-entropy: label {l} at position {p} exceeds {k} classes"
                );
                targets.push((p, l as usize));
            }
        }
        if targets.is_empty() {
            return Err(Error::EmptyMask);
        }
        let total: f64 = targets.iter().map(|&(p, l)| -v.data()[l * s + p].ln()).sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.record(out, Op::CrossEntropy { probs, targets }, &[probs]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    /// `sum_i weights[i] * x[i]` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let v = self.value(x);
        ensure!(
            weights.numel() == v.numel(),
            "weighted sum: {} weights for {} values",
            weights.numel(),
            v.numel()
        );
        let out = Tensor::scalar(v.dot(weights));
        Ok(self.record(
            out,
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            &[x],
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        Ok(self.record(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        ))
    }

    /// Hash of every data-dependent branch taken in the forward pass (relu
    /// signs, max-pool winners). Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => {
                    for &a in self.value(*x).data() {
                        (a > 0.0).hash(&mut h);
                    }
                }
                Op::Pool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a scalar, accumulating into tracked leaves.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        ensure!(
            self.value(output).numel() == 1,
            "backward needs a scalar output, got shape {:?}",
            self.value(output).shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
            } else {
                self.propagate(i, &g, &mut grads)?;
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let need_b = b.is_some_and(|b| self.needs(b));
                let cg = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    spec,
                    g,
                    (self.needs(*x), self.needs(*w), need_b),
                )?;
                if let Some(gx) = cg.input {
                    self.send(grads, *x, gx);
                }
                if let Some(gw) = cg.weight {
                    self.send(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.send(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.send(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::BiasAdd { x, b } => {
                let s = self.value(*x).spatial_len();
                self.send(grads, *x, g.to_vec());
                if self.needs(*b) {
                    self.send(grads, *b, g.chunks(s).map(|r| r.iter().sum()).collect());
                }
            }
            Op::ScaleChannels { x, w } => {
                let vx = self.value(*x);
                let vw = self.value(*w).data();
                let s = vx.spatial_len();
                if self.needs(*x) {
                    let mut gx = g.to_vec();
                    for (c, row) in gx.chunks_mut(s).enumerate() {
                        row.iter_mut().for_each(|v| *v *= vw[c]);
                    }
                    self.send(grads, *x, gx);
                }
                if self.needs(*w) {
                    let gw = g
                        .chunks(s)
                        .zip(vx.data().chunks(s))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.send(grads, *w, gw);
                }
            }
            Op::ScaleSpatial { x, s } => {
                let vx = self.value(*x);
                let vs = self.value(*s).data();
                let n = vx.spatial_len();
                if self.needs(*x) {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(n) {
                        row.iter_mut().zip(vs).for_each(|(v, w)| *v *= w);
                    }
                    self.send(grads, *x, gx);
                }
                if self.needs(*s) {
                    let mut gs = vec![0.0; n];
                    for (gr, xr) in g.chunks(n).zip(vx.data().chunks(n)) {
                        for p in 0..n {
                            gs[p] += gr[p] * xr[p];
                        }
                    }
                    self.send(grads, *s, gs);
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.send(grads, x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.send(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (k, s) = (y.channels(), y.spatial_len());
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for p in 0..s {
                    let dot: f64 = (0..k).map(|c| g[c * s + p] * yd[c * s + p]).sum();
                    for c in 0..k {
                        gx[c * s + p] = yd[c * s + p] * (g[c * s + p] - dot);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Pool {
                x,
                kind,
                axes,
                argmax,
            } => {
                let vx = self.value(*x);
                let (c, s) = (vx.channels(), vx.spatial_len());
                let mut gx = vec![0.0; vx.numel()];
                match (axes, kind) {
                    (PoolAxes::Spatial, PoolKind::Avg) => {
                        for ch in 0..c {
                            let v = g[ch] / s as f64;
                            gx[ch * s..(ch + 1) * s].iter_mut().for_each(|a| *a = v);
                        }
                    }
                    (PoolAxes::Spatial, PoolKind::Max) => {
                        for ch in 0..c {
                            gx[ch * s + argmax[ch]] = g[ch];
                        }
                    }
                    (PoolAxes::Channel, PoolKind::Avg) => {
                        for ch in 0..c {
                            for p in 0..s {
                                gx[ch * s + p] = g[p] / c as f64;
                            }
                        }
                    }
                    (PoolAxes::Channel, PoolKind::Max) => {
                        for p in 0..s {
                            gx[argmax[p] * s + p] = g[p];
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::MatVec { w, x } => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, n) = (vw.shape()[0], vw.shape()[1]);
                if self.needs(*w) {
                    let mut gw = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            gw[r * n + c] = g[r] * vx.data()[c];
                        }
                    }
                    self.send(grads, *w, gw);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gx[c] += vw.data()[r * n + c] * g[r];
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::Upsample { x, factors } => {
                let vx = self.value(*x);
                let in_strides = super::strides(vx.shape());
                let out_shape = node.value.shape();
                let mut gx = vec![0.0; vx.numel()];
                let mut idx = vec![0usize; out_shape.len()];
                for &gv in g {
                    let mut src = idx[0] * in_strides[0];
                    for a in 1..idx.len() {
                        src += (idx[a] / factors[a - 1]) * in_strides[a];
                    }
                    gx[src] += gv;
                    increment(&mut idx, out_shape);
                }
                self.send(grads, *x, gx);
            }
            Op::Scatter { x, plan } => {
                let c = self.value(*x).channels();
                self.send(grads, *x, plan.adjoint(g, c)?);
            }
            Op::CrossEntropy { probs, targets } => {
                let vp = self.value(*probs);
                let s = vp.spatial_len();
                let scale = g[0] / targets.len() as f64;
                let mut gp = vec![0.0; vp.numel()];
                for &(p, l) in targets {
                    gp[l * s + p] -= scale / vp.data()[l * s + p];
                }
                self.send(grads, *probs, gp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum { x, weights } => {
                self.send(grads, *x, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&values, &node.value, g);
                ensure!(
                    gs.len() == inputs.len(),
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    gs.len(),
                    inputs.len()
                );
                for (v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        ensure!(
                            gv.len() == self.value(*v).numel(),
                            "custom op {} returned a gradient of the wrong length",
                            op.name()
                        );
                        self.send(grads, *v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over the channel axis.
pub(crate) fn softmax_channels(v: &Tensor) -> Tensor {
    let (k, s) = (v.channels(), v.spatial_len());
    let d = v.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..s {
        let m = (0..k).map(|c| d[c * s + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..k {
            let e = (d[c * s + p] - m).exp();
            out[c * s + p] = e;
            total += e;
        }
        for c in 0..k {
            out[c * s + p] /= total;
        }
    }
    Tensor::new(v.shape().to_vec(), out).expect("shape preserved")
}

/// First index of the maximum in scan order.
pub(crate) fn first_argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 || i == 0 {
            best = (i, v);
        }
    }
    best
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[4]));
        let s = g.sigmoid(x);
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        let y = g.sum(s);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2], 3.0));
        let y = g.sum(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::new(vec![2, 1], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x);
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 5.0, 2.0, 5.0, 0.0]).unwrap());
        let m = g.pool(x, PoolKind::Max, PoolAxes::Channel).unwrap();
        assert_eq!(g.value(m).shape(), &[1, 2]);
        assert_eq!(g.value(m).data(), &[5.0, 2.0]);
        let y = g.sum(m);
        g.backward(y).unwrap();
        // column 1 ties between channel 0 and 1: first wins
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2, 3], 0.5));
        let err = g.masked_cross_entropy(p, &[0, 1, 0], &[false; 3]).unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn scope_is_recorded_in_trace() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        g.push_scope("outer");
        g.push_scope("inner");
        let y = g.relu(x);
        g.pop_scope();
        g.pop_scope();
        g.sum(y);
        let t = g.trace();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].scope, "outer/inner");
        assert_eq!(t[0].kind, OpKind::Relu);
        assert_eq!(t[1].scope, "");
    }

    #[test]
    fn averaging_plan_weights() {
        let plan = ScatterPlan::averaging(vec![3], vec![Some(1), None, Some(1), Some(0)]).unwrap();
        assert_eq!(plan.weights(), &[0.5, 0.0, 0.5, 1.0]);
        let x = Tensor::new(vec![1, 4], vec![2.0, 9.0, 4.0, 7.0]).unwrap();
        let y = plan.apply(&x).unwrap();
        assert_eq!(y.data(), &[7.0, 3.0, 0.0]);
        assert!(ScatterPlan::averaging(vec![2], vec![Some(2)]).is_err());
    }
}
