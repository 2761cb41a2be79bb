//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Node ids are
//! handed out in creation order, which is already a topological order, so the
//! backward pass is a single sweep over ids in descending order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::{self, reduce_to_shape, zip_broadcast, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    MatMul(usize, usize),
    Conv2d(usize, usize),
    MaxPool(usize, Rc<Vec<usize>>),
    CumProd(usize),
    KumaraswamyBetaKl {
        log_a: usize,
        log_b: usize,
        alpha: f64,
        beta: f64,
        terms: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients returned by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, noise, masks).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                shapes[loss.id]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(&shapes[loss.id], 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in local_gradients(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Vector-Jacobian products of `node` for the upstream gradient `g`.
fn local_gradients(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |id: usize| nodes[id].value.as_ref();
    let wants = |id: usize| nodes[id].requires_grad;
    let out = node.value.as_ref();
    let unary = |a: usize, f: &dyn Fn(usize) -> f64| {
        let data = g.data().iter().enumerate().map(|(i, gi)| gi * f(i)).collect();
        vec![(a, Tensor::new(val(a).shape(), data).expect("same shape"))]
    };
    match node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (a, reduce_to_shape(g, val(a).shape())),
            (b, reduce_to_shape(g, val(b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (a, reduce_to_shape(g, val(a).shape())),
            (b, reduce_to_shape(&g.map(|v| -v), val(b).shape())),
        ],
        Op::Mul(a, b) => {
            let mut res = Vec::new();
            if wants(a) {
                let ga = zip_broadcast("mul", g, val(b), |x, y| x * y).expect("broadcast");
                res.push((a, reduce_to_shape(&ga, val(a).shape())));
            }
            if wants(b) {
                let gb = zip_broadcast("mul", g, val(a), |x, y| x * y).expect("broadcast");
                res.push((b, reduce_to_shape(&gb, val(b).shape())));
            }
            res
        }
        Op::Div(a, b) => {
            let mut res = Vec::new();
            if wants(a) {
                let ga = zip_broadcast("div", g, val(b), |x, y| x / y).expect("broadcast");
                res.push((a, reduce_to_shape(&ga, val(a).shape())));
            }
            if wants(b) {
                // d(a/b)/db = -(a/b)/b
                let t = zip_broadcast("div", out, val(b), |q, y| q / y).expect("broadcast");
                let gb = zip_broadcast("div", g, &t, |x, y| -x * y).expect("broadcast");
                res.push((b, reduce_to_shape(&gb, val(b).shape())));
            }
            res
        }
        Op::Neg(a) => vec![(a, g.map(|v| -v))],
        Op::Scale(a, c) => vec![(a, g.map(|v| v * c))],
        Op::AddScalar(a) => vec![(a, g.clone())],
        Op::Exp(a) => unary(a, &|i| out.data()[i]),
        Op::Log(a) => unary(a, &|i| 1.0 / val(a).data()[i]),
        Op::Softplus(a) => unary(a, &|i| special::sigmoid(val(a).data()[i])),
        Op::Sigmoid(a) => unary(a, &|i| {
            let s = out.data()[i];
            s * (1.0 - s)
        }),
        Op::Clamp(a, lo, hi) => unary(a, &|i| {
            let x = val(a).data()[i];
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }),
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; out.len()];
            for ((row_g, row_s), row_o) in g
                .data()
                .chunks(n)
                .zip(out.data().chunks(n))
                .zip(data.chunks_mut(n))
            {
                let dot: f64 = row_g.iter().zip(row_s).map(|(x, y)| x * y).sum();
                for ((o, gi), si) in row_o.iter_mut().zip(row_g).zip(row_s) {
                    *o = si * (gi - dot);
                }
            }
            vec![(a, Tensor::new(out.shape(), data).expect("same shape"))]
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; out.len()];
            for ((row_g, row_l), row_o) in g
                .data()
                .chunks(n)
                .zip(out.data().chunks(n))
                .zip(data.chunks_mut(n))
            {
                let total: f64 = row_g.iter().sum();
                for ((o, gi), li) in row_o.iter_mut().zip(row_g).zip(row_l) {
                    *o = gi - li.exp() * total;
                }
            }
            vec![(a, Tensor::new(out.shape(), data).expect("same shape"))]
        }
        Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(a).len().max(1) as f64;
            vec![(a, Tensor::full(val(a).shape(), g.item() / n))]
        }
        Op::SumAxis(a, axis) => {
            let shape = val(a).shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let extent = shape[axis];
            let mut data = vec![0.0; val(a).len()];
            for o in 0..outer {
                for e in 0..extent {
                    let dst = &mut data[(o * extent + e) * inner..][..inner];
                    dst.copy_from_slice(&g.data()[o * inner..][..inner]);
                }
            }
            vec![(a, Tensor::new(shape, data).expect("same shape"))]
        }
        Op::Reshape(a) => vec![(a, g.reshape(val(a).shape()).expect("same length"))],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut res = Vec::new();
            if wants(a) {
                let mut ga = Tensor::zeros(av.shape());
                tensor::gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
                res.push((a, ga));
            }
            if wants(b) {
                let mut gb = Tensor::zeros(bv.shape());
                tensor::gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                res.push((b, gb));
            }
            res
        }
        Op::Conv2d(x, k) => {
            let (gx, gk) = tensor::conv2d_backward(val(x), val(k), g, wants(x), wants(k));
            gx.map(|t| (x, t)).into_iter().chain(gk.map(|t| (k, t))).collect()
        }
        Op::MaxPool(a, ref arg) => {
            let mut ga = Tensor::zeros(val(a).shape());
            for (&src, gi) in arg.iter().zip(g.data()) {
                ga.data_mut()[src] += gi;
            }
            vec![(a, ga)]
        }
        Op::CumProd(a) => {
            let x = val(a);
            let n = *x.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; x.len()];
            for ((row_x, row_p), (row_g, row_o)) in x
                .data()
                .chunks(n)
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n).zip(data.chunks_mut(n)))
            {
                // d p_k / d x_i = p_k / x_i for k ≥ i, accumulated right to left.
                let mut tail = 0.0;
                for i in (0..n).rev() {
                    tail += row_g[i] * row_p[i];
                    row_o[i] = tail / row_x[i];
                }
            }
            vec![(a, Tensor::new(x.shape(), data).expect("same shape"))]
        }
        Op::KumaraswamyBetaKl {
            log_a,
            log_b,
            alpha,
            beta,
            terms,
        } => {
            let (la, lb) = (val(log_a), val(log_b));
            let mut ga = Tensor::zeros(la.shape());
            let mut gb = Tensor::zeros(lb.shape());
            for i in 0..la.len() {
                let (a, b) = (la.data()[i].exp(), lb.data()[i].exp());
                let (_, da, db) = special::kumaraswamy_beta_kl_with_grad(a, b, alpha, beta, terms);
                // chain through a = exp(log_a), b = exp(log_b)
                ga.data_mut()[i] = g.item() * da * a;
                gb.data_mut()[i] = g.item() * db * b;
            }
            vec![(log_a, ga), (log_b, gb)]
        }
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.push(v, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = zip_broadcast(name, &self.value(), &other.value(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(v, op, rg))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Var<'g> {
        self.neg().add_scalar(c)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn softplus(&self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), special::softplus)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), special::sigmoid)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), move |x| x.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let x = self.value();
        let v = softmax_rows(&x, false);
        self.graph.push(v, Op::Softmax(self.id), self.requires_grad())
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'g> {
        let x = self.value();
        let v = softmax_rows(&x, true);
        self.graph.push(v, Op::LogSoftmax(self.id), self.requires_grad())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.push(v, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.graph.push(v, Op::Mean(self.id), self.requires_grad())
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::dimension("sum_axis", shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..][..inner];
            for e in 0..extent {
                let src = &x.data()[(o * extent + e) * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let v = Tensor::new(&out_shape, data)?;
        Ok(self
            .graph
            .push(v, Op::SumAxis(self.id, axis), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = tensor::matmul(&self.value(), &other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(v, Op::MatMul(self.id, other.id), rg))
    }

    /// "Same"-padded stride-1 cross-correlation; `self` is NHWC, `kernel` is `[h, l, C, F]`.
    pub fn conv2d(&self, kernel: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&kernel);
        let v = tensor::conv2d(&self.value(), &kernel.value())?;
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.graph.push(v, Op::Conv2d(self.id, kernel.id), rg))
    }

    pub fn max_pool_2x2(&self) -> Result<Var<'g>> {
        let (v, arg) = tensor::max_pool_2x2(&self.value())?;
        Ok(self.graph.push(
            v,
            Op::MaxPool(self.id, Rc::new(arg)),
            self.requires_grad(),
        ))
    }

    /// Running product along the last axis.
    pub fn cumprod(&self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let mut acc = 1.0;
            for v in row.iter_mut() {
                acc *= *v;
                *v = acc;
            }
        }
        let v = Tensor::new(x.shape(), data).expect("same shape");
        self.graph.push(v, Op::CumProd(self.id), self.requires_grad())
    }

    /// Summed KL(Kumaraswamy(a, b) ‖ Beta(alpha, beta)) with `a = exp(self)`, `b = exp(log_b)`.
    pub(crate) fn kumaraswamy_beta_kl(
        &self,
        log_b: Var<'g>,
        alpha: f64,
        beta: f64,
        terms: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(&log_b);
        let (la, lb) = (self.value(), log_b.value());
        if la.shape() != lb.shape() {
            return Err(Error::dimension("kumaraswamy_beta_kl", la.shape(), lb.shape()));
        }
        let total: f64 = la
            .data()
            .iter()
            .zip(lb.data())
            .map(|(a, b)| special::kumaraswamy_beta_kl(a.exp(), b.exp(), alpha, beta, terms))
            .sum();
        let rg = self.requires_grad() || log_b.requires_grad();
        Ok(self.graph.push(
            Tensor::scalar(total),
            Op::KumaraswamyBetaKl {
                log_a: self.id,
                log_b: log_b.id,
                alpha,
                beta,
                terms,
            },
            rg,
        ))
    }
}

pub(crate) fn softmax_rows(x: &Tensor, log: bool) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            total += (*v - max).exp();
        }
        let log_total = total.ln();
        for v in row.iter_mut() {
            let l = *v - max - log_total;
            *v = if log { l } else { l.exp() };
        }
    }
    Tensor::new(x.shape(), data).expect("same shape")
}
