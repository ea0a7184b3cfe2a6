//! Expression graph with forward evaluation and reverse-mode gradients.
//!
//! Nodes are appended in construction order, so a node's inputs always have
//! smaller ids and the node list is already topologically sorted.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, Dims4};
use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds. Attributes live on the variant.
#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf bound at evaluation time. `differentiable` leaves receive gradients.
    Input { differentiable: bool },
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    Scale(f64),
    Offset(f64),
    Relu,
    Exp,
    Sigmoid,
    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    Log { floor: f64 },
    Sum,
    Mean,
    /// Stride-1 same-padded convolution: inputs `(x, weight)` or `(x, weight, bias)`.
    Conv2d,
    ChannelMean,
    ChannelVar,
    /// Inputs `(x, mean, var, gamma, beta)`.
    BatchNorm { eps: f64 },
    SoftmaxChannels,
    /// Normalized spatial log-sum-exp with one temperature per (image, channel).
    SpatialLse { r: Vec<f64> },
    SpatialMean,
    SpatialMax,
    /// Folds channels `old..C` into channel 0.
    Rearrange { old: usize },
    TotalVariation,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Sigmoid => "sigmoid",
            Op::Log { .. } => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Conv2d => "conv2d",
            Op::ChannelMean => "channel_mean",
            Op::ChannelVar => "channel_var",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SoftmaxChannels => "softmax",
            Op::SpatialLse { .. } => "spatial_lse",
            Op::SpatialMean => "spatial_mean",
            Op::SpatialMax => "spatial_max",
            Op::Rearrange { .. } => "rearrange",
            Op::TotalVariation => "total_variation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub type Bindings = HashMap<NodeId, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for i in &inputs {
            assert!(i.0 < self.nodes.len(), "input {} not yet defined", i.0);
        }
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self) -> NodeId {
        self.push(Op::Input { differentiable: true }, vec![])
    }

    /// Leaf that never receives a gradient (data, labels).
    pub fn data(&mut self) -> NodeId {
        self.push(Op::Input { differentiable: false }, vec![])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t), vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(c), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn log(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::Log { floor }, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a])
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> NodeId {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Op::Conv2d, inputs)
    }

    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::ChannelMean, vec![x])
    }

    pub fn channel_var(&mut self, x: NodeId) -> NodeId {
        self.push(Op::ChannelVar, vec![x])
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        mean: NodeId,
        var: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> NodeId {
        self.push(Op::BatchNorm { eps }, vec![x, mean, var, gamma, beta])
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SoftmaxChannels, vec![x])
    }

    pub fn spatial_lse(&mut self, x: NodeId, r: Vec<f64>) -> NodeId {
        self.push(Op::SpatialLse { r }, vec![x])
    }

    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SpatialMean, vec![x])
    }

    pub fn spatial_max(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SpatialMax, vec![x])
    }

    pub fn rearrange(&mut self, x: NodeId, old: usize) -> NodeId {
        self.push(Op::Rearrange { old }, vec![x])
    }

    pub fn total_variation(&mut self, x: NodeId) -> NodeId {
        self.push(Op::TotalVariation, vec![x])
    }

    /// Ids of all leaves that receive gradients, ascending.
    pub fn differentiable_inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input { differentiable: true }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }
}

/// Forward values for every node of a graph.
pub struct Evaluation<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
    needs_grad: Vec<bool>,
}

/// Forward pass over the whole graph.
pub fn evaluate<'a>(graph: &'a Graph, inputs: &'a Bindings) -> Result<Evaluation<'a>, NumError> {
    let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(graph.nodes.len());
    let mut needs_grad = Vec::with_capacity(graph.nodes.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        let (value, ng) = match &node.op {
            Op::Input { differentiable } => {
                let t = inputs.get(&NodeId(id)).ok_or(NumError::Unbound(id))?;
                (Cow::Borrowed(t), *differentiable)
            }
            Op::Constant(t) => (Cow::Borrowed(t), false),
            op => {
                let args: Vec<&Tensor> = node.inputs.iter().map(|i| values[i.0].as_ref()).collect();
                let out = forward_op(op, &args).map_err(|detail| NumError::Shape { node: id, detail })?;
                if !out.is_finite() {
                    return Err(NumError::NonFinite {
                        node: id,
                        op: op.name(),
                    });
                }
                let ng = node.inputs.iter().any(|i| needs_grad[i.0]);
                (Cow::Owned(out), ng)
            }
        };
        values.push(value);
        needs_grad.push(ng);
    }
    Ok(Evaluation {
        graph,
        values,
        needs_grad,
    })
}

/// Gradients of a scalar node with respect to every differentiable leaf.
pub fn gradients(
    graph: &Graph,
    inputs: &Bindings,
    seed: NodeId,
) -> Result<HashMap<NodeId, Tensor>, NumError> {
    evaluate(graph, inputs)?.backward(seed)
}

fn shape_of(t: &Tensor) -> Result<Dims4, String> {
    Dims4::from_shape(t.shape()).ok_or_else(|| format!("expected 4-d tensor, got {:?}", t.shape()))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn vec_len(t: &Tensor, n: usize, what: &str) -> Result<(), String> {
    if t.len() != n {
        return Err(format!("{what} has {} entries, expected {n}", t.len()));
    }
    Ok(())
}

fn forward_op(op: &Op, a: &[&Tensor]) -> Result<Tensor, String> {
    let ok = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).map_err(|e| e.to_string());
    match op {
        Op::Input { .. } | Op::Constant(_) => unreachable!("leaves are bound directly"),
        Op::Add | Op::Sub | Op::Mul => {
            same_shape(a[0], a[1])?;
            let f = match op {
                Op::Add => |x: f64, y: f64| x + y,
                Op::Sub => |x: f64, y: f64| x - y,
                _ => |x: f64, y: f64| x * y,
            };
            let data = a[0].data().iter().zip(a[1].data()).map(|(&x, &y)| f(x, y)).collect();
            ok(a[0].shape().to_vec(), data)
        }
        Op::Scale(c) => Ok(a[0].map(|v| v * c)),
        Op::Offset(c) => Ok(a[0].map(|v| v + c)),
        Op::Relu => Ok(a[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Exp => Ok(a[0].map(f64::exp)),
        Op::Sigmoid => Ok(a[0].map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })),
        Op::Log { floor } => Ok(a[0].map(|v| v.max(*floor).ln())),
        Op::Sum => Ok(Tensor::scalar(a[0].sum())),
        Op::Mean => Ok(Tensor::scalar(a[0].sum() / a[0].len() as f64)),
        Op::Conv2d => {
            let xd = shape_of(a[0])?;
            let ws = a[1].shape();
            let (co, k) = match *ws {
                [co, ci, k, k2] if ci == xd.c && k == k2 && k % 2 == 1 => (co, k),
                _ => return Err(format!("conv weight {:?} incompatible with input {:?}", ws, a[0].shape())),
            };
            let bias = match a.get(2) {
                Some(b) => {
                    vec_len(b, co, "conv bias")?;
                    Some(b.data())
                }
                None => None,
            };
            let out = kernels::conv2d_forward(a[0].data(), xd, a[1].data(), co, k, bias);
            ok(vec![xd.n, co, xd.h, xd.w], out)
        }
        Op::ChannelMean => {
            let d = shape_of(a[0])?;
            ok(vec![d.c], kernels::channel_mean(a[0].data(), d))
        }
        Op::ChannelVar => {
            let d = shape_of(a[0])?;
            let mean = kernels::channel_mean(a[0].data(), d);
            ok(vec![d.c], kernels::channel_var(a[0].data(), d, &mean))
        }
        Op::BatchNorm { eps } => {
            let d = shape_of(a[0])?;
            for (t, what) in a[1..].iter().zip(["mean", "var", "gamma", "beta"]) {
                vec_len(t, d.c, what)?;
            }
            if a[2].data().iter().any(|&v| v + eps <= 0.0) {
                return Err("batchnorm variance must be positive".into());
            }
            let out = kernels::batchnorm_forward(
                a[0].data(),
                d,
                a[1].data(),
                a[2].data(),
                a[3].data(),
                a[4].data(),
                *eps,
            );
            ok(a[0].shape().to_vec(), out)
        }
        Op::SoftmaxChannels => {
            let d = shape_of(a[0])?;
            ok(a[0].shape().to_vec(), kernels::softmax_channels(a[0].data(), d))
        }
        Op::SpatialLse { r } => {
            let d = shape_of(a[0])?;
            if r.len() != d.n * d.c {
                return Err(format!("{} temperatures for {} planes", r.len(), d.n * d.c));
            }
            if r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err("temperatures must be positive".into());
            }
            ok(vec![d.n, d.c], kernels::spatial_lse(a[0].data(), d, r))
        }
        Op::SpatialMean => {
            let d = shape_of(a[0])?;
            ok(vec![d.n, d.c], kernels::spatial_mean(a[0].data(), d))
        }
        Op::SpatialMax => {
            let d = shape_of(a[0])?;
            let hw = d.plane();
            let idx = kernels::spatial_argmax(a[0].data(), d);
            let data = idx.iter().enumerate().map(|(i, &j)| a[0].data()[i * hw + j]).collect();
            ok(vec![d.n, d.c], data)
        }
        Op::Rearrange { old } => {
            let d = shape_of(a[0])?;
            if *old == 0 || *old > d.c {
                return Err(format!("cannot fold {} channels into {old}", d.c));
            }
            ok(vec![d.n, *old, d.h, d.w], kernels::rearrange(a[0].data(), d, *old))
        }
        Op::TotalVariation => {
            let d = shape_of(a[0])?;
            Ok(Tensor::scalar(kernels::total_variation(a[0].data(), d)))
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref()
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Discrete state at nondifferentiable points: relu signs, max-pool winners
    /// and active log floors. Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.graph.nodes {
            match &node.op {
                Op::Relu => {
                    let x = self.value(node.inputs[0]);
                    sig.extend(x.data().iter().map(|&v| (v > 0.0) as u64));
                }
                Op::Log { floor } => {
                    let x = self.value(node.inputs[0]);
                    sig.extend(x.data().iter().map(|&v| (v > *floor) as u64));
                }
                Op::SpatialMax => {
                    let x = self.value(node.inputs[0]);
                    let d = Dims4::from_shape(x.shape()).expect("checked in forward");
                    sig.extend(kernels::spatial_argmax(x.data(), d).into_iter().map(|i| i as u64));
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, seed: NodeId) -> Result<HashMap<NodeId, Tensor>, NumError> {
        let seed_val = self.value(seed);
        if !seed_val.is_scalar() {
            return Err(NumError::NonScalarSeed {
                node: seed.0,
                shape: seed_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![1.0]);
        for id in (0..=seed.0).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.graph.nodes[id];
            if let Op::Input { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            let contribs = self.backward_op(id, &g);
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if self.needs_grad[input.0] {
                        accumulate(&mut grads[input.0], c);
                    }
                }
            }
        }
        let mut out = HashMap::new();
        for leaf in self.graph.differentiable_inputs() {
            let shape = self.value(leaf).shape().to_vec();
            let data = grads
                .get_mut(leaf.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            out.insert(leaf, Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    fn wants(&self, id: usize, k: usize) -> bool {
        self.needs_grad[self.graph.nodes[id].inputs[k].0]
    }

    /// Contribution to each input's gradient; `None` for inputs that need none.
    fn backward_op(&self, id: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.graph.nodes[id];
        let arg = |k: usize| self.value(node.inputs[k]);
        let out = self.values[id].as_ref();
        let want = |k: usize| self.wants(id, k);
        match &node.op {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Op::Mul => {
                let (x, y) = (arg(0).data(), arg(1).data());
                vec![
                    want(0).then(|| g.iter().zip(y).map(|(g, y)| g * y).collect()),
                    want(1).then(|| g.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::Offset(_) => vec![Some(g.to_vec())],
            Op::Relu => {
                let x = arg(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Exp => vec![Some(g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
            Op::Sigmoid => vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            )],
            Op::Log { floor } => {
                let x = arg(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > *floor { g / x } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Sum => vec![Some(vec![g[0]; arg(0).len()])],
            Op::Mean => {
                let n = arg(0).len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::Conv2d => {
                let x = arg(0);
                let w = arg(1);
                let xd = Dims4::from_shape(x.shape()).expect("checked in forward");
                let (co, k) = (w.shape()[0], w.shape()[2]);
                let mut res = vec![
                    want(0).then(|| kernels::conv2d_backward_input(g, xd, w.data(), co, k)),
                    want(1).then(|| kernels::conv2d_backward_weight(g, x.data(), xd, co, k)),
                ];
                if node.inputs.len() == 3 {
                    let od = Dims4 { c: co, ..xd };
                    res.push(want(2).then(|| kernels::conv2d_backward_bias(g, od)));
                }
                res
            }
            Op::ChannelMean => {
                let d = Dims4::from_shape(arg(0).shape()).expect("checked in forward");
                let hw = d.plane();
                let m = (d.n * hw) as f64;
                let mut gx = vec![0.0; d.len()];
                for b in 0..d.n {
                    for c in 0..d.c {
                        gx[(b * d.c + c) * hw..][..hw].fill(g[c] / m);
                    }
                }
                vec![Some(gx)]
            }
            Op::ChannelVar => {
                let x = arg(0);
                let d = Dims4::from_shape(x.shape()).expect("checked in forward");
                let hw = d.plane();
                let m = (d.n * hw) as f64;
                let mean = kernels::channel_mean(x.data(), d);
                let mut gx = vec![0.0; d.len()];
                for b in 0..d.n {
                    for c in 0..d.c {
                        let off = (b * d.c + c) * hw;
                        let s = 2.0 * g[c] / m;
                        for i in off..off + hw {
                            gx[i] = s * (x.data()[i] - mean[c]);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::BatchNorm { eps } => {
                let x = arg(0);
                let d = Dims4::from_shape(x.shape()).expect("checked in forward");
                let gr = kernels::batchnorm_backward(
                    g,
                    x.data(),
                    d,
                    arg(1).data(),
                    arg(2).data(),
                    arg(3).data(),
                    *eps,
                );
                vec![Some(gr.x), Some(gr.mean), Some(gr.var), Some(gr.gamma), Some(gr.beta)]
            }
            Op::SoftmaxChannels => {
                let d = Dims4::from_shape(out.shape()).expect("checked in forward");
                vec![Some(kernels::softmax_channels_backward(g, out.data(), d))]
            }
            Op::SpatialLse { r } => {
                let x = arg(0);
                let d = Dims4::from_shape(x.shape()).expect("checked in forward");
                vec![Some(kernels::spatial_lse_backward(g, x.data(), d, r))]
            }
            Op::SpatialMean => {
                let d = Dims4::from_shape(arg(0).shape()).expect("checked in forward");
                let hw = d.plane();
                let mut gx = vec![0.0; d.len()];
                for (i, gv) in g.iter().enumerate() {
                    gx[i * hw..(i + 1) * hw].fill(gv / hw as f64);
                }
                vec![Some(gx)]
            }
            Op::SpatialMax => {
                let x = arg(0);
                let d = Dims4::from_shape(x.shape()).expect("checked in forward");
                let hw = d.plane();
                let mut gx = vec![0.0; d.len()];
                for (i, j) in kernels::spatial_argmax(x.data(), d).into_iter().enumerate() {
                    gx[i * hw + j] = g[i];
                }
                vec![Some(gx)]
            }
            Op::Rearrange { old } => {
                let d = Dims4::from_shape(arg(0).shape()).expect("checked in forward");
                vec![Some(kernels::rearrange_backward(g, d, *old))]
            }
            Op::TotalVariation => {
                let x = arg(0);
                let d = Dims4::from_shape(x.shape()).expect("checked in forward");
                vec![Some(kernels::total_variation_backward(g[0], x.data(), d))]
            }
        }
    }
}
