//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters
//! are pulled in from a [`ParamStore`] and deduplicated, so a sub-network used
//! several times in one step accumulates all of its gradient contributions.
//! [`Graph::detach`] cuts gradient flow while keeping the value.

pub mod kernels;

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamGrads, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    LogClamp(Var, f64),
    AvgPool(Var, usize, usize),
    Resize(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Diff(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    WeightedSum(Var, Rc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<'a> {
    params: Option<&'a ParamStore>,
    frozen: Vec<ParamGroup>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            params: None,
            frozen: Vec::new(),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }
}

impl<'a> Graph<'a> {
    pub fn with_params(params: &'a ParamStore) -> Self {
        Graph {
            params: Some(params),
            frozen: Vec::new(),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    /// Parameters of these groups enter the tape as constants.
    pub fn freeze(mut self, groups: &[ParamGroup]) -> Self {
        self.frozen.extend_from_slice(groups);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that collects gradients (used for probing inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let trainable = !self.frozen.contains(&store.group(id));
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.ng(a);
        self.push(out, Op::LogClamp(a, floor), ng)
    }

    /// Non-overlapping `k x k` mean pooling.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Var {
        self.avg_pool_rect(a, k, k)
    }

    pub fn avg_pool_rect(&mut self, a: Var, kh: usize, kw: usize) -> Var {
        if kh == 1 && kw == 1 {
            return a;
        }
        let out = kernels::avg_pool_forward(self.value(a), kh, kw);
        let ng = self.ng(a);
        self.push(out, Op::AvgPool(a, kh, kw), ng)
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&mut self, a: Var, h: usize, w: usize) -> Var {
        let (_, _, ih, iw) = self.value(a).dims4();
        if (ih, iw) == (h, w) {
            return a;
        }
        let out = kernels::resize_bilinear_forward(self.value(a), h, w);
        let ng = self.ng(a);
        self.push(out, Op::Resize(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&vals);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = kernels::softmax_channels(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn diff_x(&mut self, a: Var) -> Var {
        let out = kernels::diff_forward(self.value(a), 3);
        let ng = self.ng(a);
        self.push(out, Op::Diff(a, 3), ng)
    }

    pub fn diff_y(&mut self, a: Var) -> Var {
        let out = kernels::diff_forward(self.value(a), 2);
        let ng = self.ng(a);
        self.push(out, Op::Diff(a, 2), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        let ng = self.ng(a);
        self.push(out, Op::MeanAll(a), ng)
    }

    /// `sum(weights * a)` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Rc<Tensor>) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s: f64 = t.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), ng)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b)));
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need);
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |d, x| d * x));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(av, |d, x| d * x));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Silu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |d, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        d * s * (1.0 + x * (1.0 - s))
                    }),
                );
            }
            Op::Tanh(a) => acc(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |d, x| {
                        if x > 0.0 {
                            d
                        } else if x < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |d, x| 2.0 * d * x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |d, r| if r > 0.0 { 0.5 * d / r } else { 0.0 })),
            Op::LogClamp(a, floor) => {
                let f = *floor;
                acc(*a, g.zip_map(self.value(*a), |d, x| if x > f { d / x } else { 0.0 }));
            }
            Op::AvgPool(a, kh, kw) => acc(*a, kernels::avg_pool_backward(g, *kh, *kw)),
            Op::Resize(a) => {
                let (_, _, h, w) = self.value(*a).dims4();
                acc(*a, kernels::resize_bilinear_backward(g, h, w));
            }
            Op::Concat(parts) => {
                let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).dims4().1).collect();
                for (p, d) in parts.iter().zip(kernels::split_channels(g, &sizes)) {
                    acc(*p, d);
                }
            }
            Op::Softmax(a) => acc(*a, kernels::softmax_channels_backward(y, g)),
            Op::Diff(a, axis) => acc(*a, kernels::diff_backward(g, *axis)),
            Op::SumAll(a) => {
                let d = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::full(x.shape(), g.item() / x.numel() as f64));
            }
            Op::WeightedSum(a, w) => {
                let d = g.item();
                acc(*a, w.map(|v| v * d));
            }
        }
    }

    /// Collect parameter gradients from a finished backward pass.
    pub fn param_grads(&self, grads: &Grads) -> ParamGrads {
        let n = self.params.map_or(0, |p| p.len());
        let mut out = ParamGrads::new(n);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.wrt(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}
