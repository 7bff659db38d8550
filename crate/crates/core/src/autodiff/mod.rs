//! Reverse-mode automatic differentiation over a fixed set of image ops.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! the ids of its inputs, so inputs always precede their consumers. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`] for
//! every node reachable from the root that requires a gradient.

mod conv;
mod resample;

pub use conv::{conv_out_dim, HetPlan};

use std::fmt;
use std::sync::Arc;

use crate::deformable::{edsc_backward_raw, edsc_forward_raw, EdscInputs};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: receives the input values, the output
/// value and the output gradient, returns one gradient per input.
pub type CustomBackward<T> =
    Arc<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

/// Node ids of the synthesis operands, see [`Graph::edsc`].
#[derive(Debug, Clone, Copy)]
pub struct EdscNodes {
    pub frame1: NodeId,
    pub frame2: NodeId,
    pub k1v: NodeId,
    pub k1h: NodeId,
    pub k2v: NodeId,
    pub k2h: NodeId,
    pub offset1: NodeId,
    pub offset2: NodeId,
    pub mask1: NodeId,
    pub mask2: NodeId,
    pub bias: NodeId,
}

impl EdscNodes {
    fn ids(&self) -> [NodeId; 11] {
        [
            self.frame1,
            self.frame2,
            self.k1v,
            self.k1h,
            self.k2v,
            self.k2h,
            self.offset1,
            self.offset2,
            self.mask1,
            self.mask2,
            self.bias,
        ]
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    HetConv {
        input: NodeId,
        w3: NodeId,
        w1: NodeId,
        bias: NodeId,
        plan: Arc<HetPlan>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    AvgPool(NodeId),
    Upsample(NodeId),
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    Edsc(EdscNodes, usize),
    Charbonnier {
        pred: NodeId,
        target: NodeId,
        eps: T,
    },
    Mse(NodeId, NodeId),
    Dot(NodeId, Tensor<T>),
    Custom(Vec<NodeId>, CustomBackward<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::HetConv { .. } => "hetconv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::AvgPool(_) => "avg_pool2x2",
            Op::Upsample(_) => "upsample_bilinear2x",
            Op::Concat(..) => "concat_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Edsc(..) => "edsc",
            Op::Charbonnier { .. } => "charbonnier",
            Op::Mse(..) => "mse",
            Op::Dot(..) => "dot",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input: no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let g = conv::conv_geom(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let out = conv::conv2d_forward(self.value(input), self.value(weight), self.value(bias), g);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &[input, weight, bias],
        )
    }

    /// Heterogeneous convolution: per filter, `ceil(cin / P)` channels through
    /// 3x3 kernels (padding 1) and the rest through 1x1 kernels.
    pub fn hetconv2d(
        &mut self,
        input: NodeId,
        w3: NodeId,
        w1: NodeId,
        bias: NodeId,
        plan: Arc<HetPlan>,
    ) -> Result<NodeId> {
        conv::check_hetconv(self.value(input), self.value(w3), self.value(w1), self.value(bias), &plan)?;
        let out = conv::hetconv_forward(
            self.value(input),
            self.value(w3),
            self.value(w1),
            self.value(bias),
            &plan,
        );
        self.push(
            out,
            Op::HetConv {
                input,
                w3,
                w1,
                bias,
                plan,
            },
            &[input, w3, w1, bias],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn avg_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.height % 2 != 0 || s.width % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2x2",
                format!("odd spatial size {}x{}", s.height, s.width),
            ));
        }
        let out = resample::avg_pool2x2_forward(self.value(x));
        self.push(out, Op::AvgPool(x), &[x])
    }

    pub fn upsample_bilinear2x(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).plane() == 0 {
            return Err(Error::shape("upsample_bilinear2x", "empty input"));
        }
        let out = resample::upsample2x_forward(self.value(x));
        self.push(out, Op::Upsample(x), &[x])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
            return Err(Error::shape("concat_channels", format!("{} vs {}", sa, sb)));
        }
        let out = resample::concat_forward(self.value(a), self.value(b));
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{} vs {}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Deformable separable synthesis; see [`crate::deformable`].
    pub fn edsc(&mut self, nodes: EdscNodes) -> Result<NodeId> {
        let ids = nodes.ids();
        let n = self.edsc_inputs(&nodes).validate()?;
        let out = edsc_forward_raw(&self.edsc_inputs(&nodes), n);
        self.push(out, Op::Edsc(nodes, n), &ids)
    }

    fn edsc_inputs(&self, nodes: &EdscNodes) -> EdscInputs<'_, T> {
        EdscInputs {
            i1: self.value(nodes.frame1),
            i2: self.value(nodes.frame2),
            k1v: self.value(nodes.k1v),
            k1h: self.value(nodes.k1h),
            k2v: self.value(nodes.k2v),
            k2h: self.value(nodes.k2h),
            off1: self.value(nodes.offset1),
            off2: self.value(nodes.offset2),
            mask1: self.value(nodes.mask1),
            mask2: self.value(nodes.mask2),
            bias: self.value(nodes.bias),
        }
    }

    /// Mean Charbonnier penalty `sqrt(d^2 + eps^2)` over all elements.
    pub fn charbonnier(&mut self, pred: NodeId, target: NodeId, eps: T) -> Result<NodeId> {
        self.same_shape("charbonnier", pred, target)?;
        if eps <= T::zero() {
            return Err(Error::invalid("charbonnier epsilon must be positive"));
        }
        let e2 = eps * eps;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                (d * d + e2.as_f64()).sqrt()
            })
            .sum();
        let out = Tensor::scalar(T::lit(sum / p.len() as f64));
        self.push(out, Op::Charbonnier { pred, target, eps }, &[pred, target])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (p, t) = (self.value(a).data(), self.value(b).data());
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::lit(sum / p.len() as f64));
        self.push(out, Op::Mse(a, b), &[a, b])
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn dot(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        if weights.shape() != self.shape(x) {
            return Err(Error::shape("dot", format!("{} vs {}", weights.shape(), self.shape(x))));
        }
        let sum: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| (a * b).as_f64())
            .sum();
        self.push(Tensor::scalar(T::lit(sum)), Op::Dot(x, weights), &[x])
    }

    /// Records an op whose value was computed by the caller, with a caller
    /// supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<NodeId> {
        self.push(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dout, &mut grads)?;
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, g: Tensor<T>| accumulate(grads, id, g);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (x, w, b) = (self.value(*input), self.value(*weight), self.value(*bias));
                let g = conv::conv_geom(x, w, b, *stride, *pad)?;
                let r = conv::conv2d_backward(x, w, dout, g, needs(*input));
                if let Some(dx) = r.input {
                    acc(*input, dx);
                }
                if needs(*weight) {
                    acc(*weight, r.weight);
                }
                if needs(*bias) {
                    acc(*bias, r.bias.reshape(b.shape())?);
                }
            }
            Op::HetConv {
                input,
                w3,
                w1,
                bias,
                plan,
            } => {
                let r = conv::hetconv_backward(
                    self.value(*input),
                    self.value(*w3),
                    self.value(*w1),
                    dout,
                    plan,
                    needs(*input),
                );
                if let Some(dx) = r.input {
                    acc(*input, dx);
                }
                if needs(*w3) {
                    acc(*w3, r.w3);
                }
                if needs(*w1) {
                    acc(*w1, r.w1);
                }
                if needs(*bias) {
                    acc(*bias, r.bias.reshape(self.shape(*bias))?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = zip_map(xv, dout, |v, g| if v > T::zero() { g } else { T::zero() });
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(&node.value, dout, |s, g| g * s * (T::one() - s));
                acc(*x, d);
            }
            Op::AvgPool(x) => acc(*x, resample::avg_pool2x2_backward(self.shape(*x), dout)),
            Op::Upsample(x) => acc(*x, resample::upsample2x_backward(self.shape(*x), dout)),
            Op::Concat(a, b) => {
                let (da, db) = resample::concat_backward(self.shape(*a), self.shape(*b), dout);
                if needs(*a) {
                    acc(*a, da);
                }
                if needs(*b) {
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, dout.clone());
                }
                if needs(*b) {
                    acc(*b, dout.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, dout.clone());
                }
                if needs(*b) {
                    acc(*b, dout.map(|g| -g));
                }
            }
            Op::Scale(x, f) => acc(*x, dout.map(|g| g * *f)),
            Op::Edsc(nodes, n) => {
                let inp = self.edsc_inputs(nodes);
                let r = edsc_backward_raw(&inp, *n, dout, [needs(nodes.frame1), needs(nodes.frame2)]);
                if let Some(d) = r.i1 {
                    acc(nodes.frame1, d);
                }
                if let Some(d) = r.i2 {
                    acc(nodes.frame2, d);
                }
                for (id, d) in [
                    (nodes.k1v, r.k1v),
                    (nodes.k1h, r.k1h),
                    (nodes.k2v, r.k2v),
                    (nodes.k2h, r.k2h),
                    (nodes.offset1, r.off1),
                    (nodes.offset2, r.off2),
                    (nodes.mask1, r.mask1),
                    (nodes.mask2, r.mask2),
                    (nodes.bias, r.bias),
                ] {
                    if needs(id) {
                        acc(id, d);
                    }
                }
            }
            Op::Charbonnier { pred, target, eps } => {
                let g = dout.data()[0];
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g / T::lit(p.numel() as f64);
                let e2 = *eps * *eps;
                let dp = zip_map(p, t, |a, b| {
                    let d = a - b;
                    scale * d / (d * d + e2).sqrt()
                });
                if needs(*target) {
                    acc(*target, dp.map(|v| -v));
                }
                if needs(*pred) {
                    acc(*pred, dp);
                }
            }
            Op::Mse(a, b) => {
                let g = dout.data()[0];
                let (x, y) = (self.value(*a), self.value(*b));
                let scale = g * T::lit(2.0 / x.numel() as f64);
                let dx = zip_map(x, y, |p, q| scale * (p - q));
                if needs(*b) {
                    acc(*b, dx.map(|v| -v));
                }
                if needs(*a) {
                    acc(*a, dx);
                }
            }
            Op::Dot(x, w) => {
                let g = dout.data()[0];
                acc(*x, w.map(|v| v * g));
            }
            Op::Custom(inputs, backward) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = backward(&vals, &node.value, dout);
                if gs.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom",
                        format!("{} gradients for {} inputs", gs.len(), inputs.len()),
                    ));
                }
                for (&id, g) in inputs.iter().zip(gs) {
                    if g.shape() != self.shape(id) {
                        return Err(Error::shape(
                            "custom",
                            format!("gradient {} for input {}", g.shape(), self.shape(id)),
                        ));
                    }
                    if needs(id) {
                        acc(id, g);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
