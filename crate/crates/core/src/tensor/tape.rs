use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::conv::{self, ResizePlan};
use super::ops::{self, Unary};
use super::Tensor;
use crate::error::{Error, Result};
use crate::ssm::kernel::{self as scan_kernel, ScanSaved};

/// A recorded primitive. Indices refer to earlier nodes on the same tape,
/// which keeps the record topologically ordered by construction.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    ScaleBy {
        scalar: usize,
        x: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Sum(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Unary {
        x: usize,
        kind: Unary,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Conv1dDepthwise {
        x: usize,
        weight: usize,
        left_pad: usize,
    },
    Resize {
        x: usize,
        plan: ResizePlan,
    },
    SelectiveScan(Box<ScanSaved>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::Narrow { x, .. }
            | Op::Permute { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Unary { x, .. }
            | Op::Resize { x, .. } => vec![*x],
            Op::ScaleBy { scalar, x } => vec![*scalar, *x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d {
                x, weight, bias, ..
            }
            | Op::DepthwiseConv2d {
                x, weight, bias, ..
            } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::Conv1dDepthwise { x, weight, .. } => vec![*x, *weight],
            Op::SelectiveScan(saved) => saved.inputs(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) name: &'static str,
}

struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// Ordered record of executed primitives for one forward pass.
///
/// A tape supports exactly one backward sweep. Values are immutable once
/// recorded; only leaf gradients are written, by [`Tape::backward`].
pub struct Tape {
    inner: RefCell<Inner>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

impl Tape {
    /// New tape; the NaN/Inf guard follows `debug_assertions`.
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                consumed: false,
            }),
            check_finite,
        }
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            name: "leaf",
        });
        Var { tape: self, id }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Usage(format!(
                "`{name}` recorded on a tape whose backward sweep already ran"
            )));
        }
        let requires_grad = op.inputs().iter().any(|&i| inner.nodes[i].requires_grad);
        // Nothing upstream wants a gradient: drop the saved intermediates.
        let op = if requires_grad { op } else { Op::Leaf };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            name,
        });
        Ok(Var { tape: self, id })
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// fan-out and are afterwards available through [`Tape::grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Usage("backward called twice on one tape".into()));
        }
        let loss_numel = inner.nodes[loss.id].value.numel();
        if loss_numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {loss_numel} values"
            )));
        }
        inner.consumed = true;
        let inner = &mut *inner;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink {
                nodes,
                grads: &mut grads,
            };
            backward_node(nodes, id, &g, &mut sink);
        }
        inner.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward sweep w.r.t. a leaf (`None` if it does
    /// not require gradients or the loss does not depend on it).
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[var.id];
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        let g = inner.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }
}

/// Accumulation target for input gradients during the reverse sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Zero-initialised (on first touch) gradient buffer for `id`, or `None`
    /// when nothing upstream of `id` needs a gradient.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn add(&mut self, id: usize, contrib: &[f64]) {
        if let Some(g) = self.slot(id) {
            g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b);
        }
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], sink: &mut GradSink) {
    let val = |i: usize| -> &Tensor { nodes[i].value.as_ref() };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add(*a, g);
            if let Some(gb) = sink.slot(*b) {
                gb.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = sink.slot(*a) {
                for ((s, g), b) in ga.iter_mut().zip(g).zip(bv) {
                    *s += g * b;
                }
            }
            if let Some(gb) = sink.slot(*b) {
                for ((s, g), a) in gb.iter_mut().zip(g).zip(av) {
                    *s += g * a;
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = sink.slot(*a) {
                for ((s, g), b) in ga.iter_mut().zip(g).zip(bv) {
                    *s += g / b;
                }
            }
            if let Some(gb) = sink.slot(*b) {
                for (((s, g), a), b) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                    *s -= g * a / (b * b);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = sink.slot(*x) {
                gx.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
            }
        }
        Op::Shift(x) | Op::Reshape(x) => sink.add(*x, g),
        Op::ScaleBy { scalar, x } => {
            let s = val(*scalar).data()[0];
            let xv = val(*x).data();
            if let Some(gs) = sink.slot(*scalar) {
                gs[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
            }
            if let Some(gx) = sink.slot(*x) {
                gx.iter_mut().zip(g).for_each(|(a, g)| *a += s * g);
            }
        }
        Op::AddBias { x, bias } => {
            sink.add(*x, g);
            if let Some(gb) = sink.slot(*bias) {
                let c = gb.len();
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::MatMul { a, b } => ops::matmul_backward(val(*a), val(*b), *a, *b, g, sink),
        Op::Narrow { x, axis, start } => {
            let out_shape = nodes[id].value.shape();
            if let Some(gx) = sink.slot(*x) {
                ops::narrow_backward(val(*x).shape(), out_shape, *axis, *start, g, gx);
            }
        }
        Op::Concat { xs, axis } => {
            let mut offset = 0;
            for &x in xs {
                let shape = val(x).shape();
                if let Some(gx) = sink.slot(x) {
                    ops::narrow_forward_into(nodes[id].value.shape(), shape, *axis, offset, g, gx);
                }
                offset += shape[*axis];
            }
        }
        Op::Permute { x, perm } => {
            if let Some(gx) = sink.slot(*x) {
                ops::permute_backward(val(*x).shape(), perm, g, gx);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = sink.slot(*x) {
                gx.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::SumAxis { x, axis } => {
            if let Some(gx) = sink.slot(*x) {
                ops::sum_axis_backward(val(*x).shape(), *axis, g, gx);
            }
        }
        Op::Unary { x, kind } => {
            let (xv, yv) = (val(*x).data(), nodes[id].value.data());
            if let Some(gx) = sink.slot(*x) {
                ops::unary_backward(*kind, xv, yv, g, gx);
            }
        }
        Op::Softmax(x) => {
            let y = &nodes[id].value;
            if let Some(gx) = sink.slot(*x) {
                ops::softmax_backward(y, g, gx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => ops::layer_norm_backward(val(*gamma), xhat, rstd, *x, *gamma, *beta, g, sink),
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        } => conv::conv2d_backward(
            val(*x),
            val(*weight),
            *x,
            *weight,
            *bias,
            *stride,
            *padding,
            nodes[id].value.shape(),
            g,
            sink,
        ),
        Op::DepthwiseConv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        } => conv::depthwise_conv2d_backward(
            val(*x),
            val(*weight),
            *x,
            *weight,
            *bias,
            *stride,
            *padding,
            nodes[id].value.shape(),
            g,
            sink,
        ),
        Op::Conv1dDepthwise {
            x,
            weight,
            left_pad,
        } => conv::conv1d_depthwise_backward(val(*x), val(*weight), *x, *weight, *left_pad, g, sink),
        Op::Resize { x, plan } => {
            if let Some(gx) = sink.slot(*x) {
                plan.backward(g, gx);
            }
        }
        Op::SelectiveScan(saved) => scan_kernel::backward(saved, nodes, g, sink),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(gl) = sink.slot(*logits) {
                ops::cross_entropy_backward(targets, probs, g[0], gl);
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        write!(f, "Var#{}<{}>{:?}", self.id, node.name, node.value.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }
}
