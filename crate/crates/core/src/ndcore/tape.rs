//! Operation tape with reverse accumulation.
//!
//! Every forward op appends one node holding its value. `backward` walks the
//! nodes in reverse and pushes adjoints into parameter leaves, which are then
//! added into the [`ParamStore`] gradients.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Row(NodeId, usize),
    ScaleBy(NodeId, NodeId),
    AddN(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<Option<NodeId>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(data))
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.constant(Tensor::zeros(&[len]))
    }

    /// Leaf for a parameter. Each parameter is copied onto the tape once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if self.param_leaves.len() <= id.0 {
            self.param_leaves.resize(id.0 + 1, None);
        }
        if let Some(node) = self.param_leaves[id.0] {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_leaves[id.0] = Some(node);
        node
    }

    /// `W x` for `W: [m, n]` and `x: [n]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::dim("matvec", ws, xs));
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.data(w);
        let xd = self.data(x);
        let out: Vec<f64> = (0..m)
            .map(|r| {
                wd[r * n..(r + 1) * n]
                    .iter()
                    .zip(xd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> NodeId {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 0.0)
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::dim("concat", self.shape(p), &[]));
            }
            data.extend_from_slice(self.data(p));
            rg |= self.rg(p);
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous slice `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice", s, &[start, len]));
        }
        let data = self.data(a)[start..start + len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::Slice(a, start), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("dot", self.shape(a), self.shape(b)));
        }
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let data = softmax(self.data(a));
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.data(a);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let data = x.iter().map(|v| v - lse).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::LogSoftmax(a), rg)
    }

    /// Row `idx` of a matrix, as a vector. Used for embedding lookups.
    pub fn row(&mut self, m: NodeId, idx: usize) -> Result<NodeId> {
        let s = self.shape(m);
        if s.len() != 2 || idx >= s[0] {
            return Err(Error::dim("row", s, &[idx]));
        }
        let cols = s[1];
        let data = self.data(m)[idx * cols..(idx + 1) * cols].to_vec();
        let rg = self.rg(m);
        Ok(self.push(Tensor::vector(data), Op::Row(m, idx), rg))
    }

    /// Element `idx` of a vector, as a scalar.
    pub fn index(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        self.slice(a, idx, 1)
    }

    /// Vector `a` times scalar node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != [1] {
            return Err(Error::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let k = self.scalar(s);
        let value = self.value(a);
        let data = value.data().iter().map(|x| x * k).collect();
        let value = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::EmptyInput("add_n"))?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.data(first).len()];
        let mut rg = false;
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("add_n", &shape, self.shape(p)));
            }
            for (d, v) in data.iter_mut().zip(self.data(p)) {
                *d += v;
            }
            rg |= self.rg(p);
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::AddN(parts.to_vec()), rg))
    }

    pub fn mean_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let s = self.add_n(parts)?;
        Ok(self.scale(s, 1.0 / parts.len() as f64))
    }

    /// Reverse accumulation from the scalar `loss`; adds into `store` gradients.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.shape(loss) != [1] {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => store.accumulate(*pid, g),
            Op::MatVec(w, x) => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.rg(*w) {
                    let xd = self.data(*x);
                    let buf = slot(grads, *w, m * n);
                    for r in 0..m {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (b, xv) in buf[r * n..(r + 1) * n].iter_mut().zip(xd) {
                                *b += gr * xv;
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    let wd = self.data(*w);
                    let buf = slot(grads, *x, n);
                    for r in 0..m {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (b, wv) in buf.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                                *b += gr * wv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, g.iter().zip(bd).map(|(g, b)| g * b));
                self.acc(grads, *b, g.iter().zip(ad).map(|(g, a)| g * a));
            }
            Op::Affine(a, k) => self.acc(grads, *a, g.iter().map(|v| v * k)),
            Op::Sigmoid(a) => self.acc(grads, *a, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s))),
            Op::Tanh(a) => self.acc(grads, *a, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t))),
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }))
            }
            Op::Square(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x))
            }
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(y).map(|(g, e)| g * e)),
            Op::Log(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| g / x))
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)))
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    self.acc(grads, *p, g[off..off + len].iter().copied());
                    off += len;
                }
            }
            Op::Slice(a, start) => {
                if self.rg(*a) {
                    let len = self.data(*a).len();
                    let buf = slot(grads, *a, len);
                    for (b, v) in buf[*start..*start + g.len()].iter_mut().zip(g) {
                        *b += v;
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.data(*a).len();
                self.acc(grads, *a, std::iter::repeat_n(g[0], len));
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, bd.iter().map(|v| g[0] * v));
                self.acc(grads, *b, ad.iter().map(|v| g[0] * v));
            }
            Op::Softmax(a) => {
                let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                self.acc(grads, *a, g.iter().zip(y).map(|(g, y)| y * (g - gy)));
            }
            Op::LogSoftmax(a) => {
                let gs: f64 = g.iter().sum();
                self.acc(grads, *a, g.iter().zip(y).map(|(g, ly)| g - ly.exp() * gs));
            }
            Op::Row(m, idx) => {
                if self.rg(*m) {
                    let cols = self.shape(*m)[1];
                    let len = self.data(*m).len();
                    let buf = slot(grads, *m, len);
                    for (b, v) in buf[idx * cols..(idx + 1) * cols].iter_mut().zip(g) {
                        *b += v;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                self.acc(grads, *a, g.iter().map(|v| v * k));
                let ad = self.data(*a);
                let ds: f64 = g.iter().zip(ad).map(|(g, a)| g * a).sum();
                self.acc(grads, *s, std::iter::once(ds));
            }
            Op::AddN(parts) => {
                for p in parts {
                    self.acc(grads, *p, g.iter().copied());
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: impl Iterator<Item = f64>) {
        if !self.rg(id) {
            return;
        }
        let len = self.data(id).len();
        let buf = slot(grads, id, len);
        for (b, v) in buf.iter_mut().zip(contrib) {
            *b += v;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
