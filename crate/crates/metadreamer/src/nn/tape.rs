//! Reverse-mode automatic differentiation on a flat tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::store::{ParamId, ParameterStore};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it
/// and only until that tape's `backward` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// Constant w.r.t. differentiation: observations, targets, noise.
    Input,
    /// Leaf that routes its adjoint into a parameter store.
    Param(ParamId),
    MatVec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MinElem(usize, usize),
    Dot(usize, usize),
    /// `scale * x + offset`; only the scale matters to the backward pass.
    Affine(usize, f64),
    /// Per-element `scale[i] * x[i] + offset[i]`, scales kept for backward.
    AffineVec(usize, Vec<f64>),
    /// Per-element clip to `[lo[i], hi[i]]`; zero gradient outside.
    Clamp(usize, Vec<f64>, Vec<f64>),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    LogSoftmax(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// One forward computation. Build it op by op, read values as you go, then
/// run [`Tape::backward`] once; the tape empties itself afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn input_vec(&mut self, values: &[f64]) -> Var {
        self.input(Tensor::vector(values))
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    /// Copies the current parameter value onto the tape as a leaf.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone())
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.nodes[a.0]
            .value
            .zip(&self.nodes[b.0].value, f)
            .map_err(|_| {
                Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape()
                ))
            })?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Element-wise minimum; ties route the gradient to the first argument.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "min", f64::min, Op::MinElem(a.0, b.0))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let value = self.nodes[w.0].value.matvec(&self.nodes[x.0].value)?;
        Ok(self.push(Op::MatVec(w.0, x.0), value))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_vector() || !tb.same_shape(ta) {
            return Err(Error::Shape(format!(
                "dot: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a.0, b.0), Tensor::scalar(s)))
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        self.dot(a, a)
    }

    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| scale * v + offset);
        self.push(Op::Affine(x.0, scale), value)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    /// Per-element affine map, used for observation normalisation.
    pub fn affine_vec(&mut self, x: Var, scale: &[f64], offset: &[f64]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.len() != scale.len() || t.len() != offset.len() {
            return Err(Error::Shape(format!(
                "affine_vec: tensor len {} vs scale {} offset {}",
                t.len(),
                scale.len(),
                offset.len()
            )));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(scale.iter().zip(offset))
            .map(|(&v, (&s, &o))| s * v + o)
            .collect();
        let value = Tensor::matrix(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::AffineVec(x.0, scale.to_vec()), value))
    }

    /// Per-element clip. Entries that arrive outside `[lo, hi]` get zero
    /// gradient, matching the saturation the environments apply.
    pub fn clamp_vec(&mut self, x: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.len() != lo.len() || t.len() != hi.len() {
            return Err(Error::Shape(format!(
                "clamp: tensor len {} vs bounds {}/{}",
                t.len(),
                lo.len(),
                hi.len()
            )));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&l, &h))| v.clamp(l, h))
            .collect();
        let value = Tensor::matrix(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::Clamp(x.0, lo.to_vec(), hi.to_vec()), value))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let n = self.nodes[x.0].value.len();
        self.clamp_vec(x, &vec![lo; n], &vec![hi; n])
            .expect("uniform bounds always match")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        self.push(op, value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of non-positive value".into()));
        }
        Ok(self.unary(x, f64::ln, Op::Ln(x.0)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x.0)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum(x.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum();
        let n = t.len().max(1) as f64;
        self.push(Op::Mean(x.0), Tensor::scalar(s / n))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_vector() {
                return Err(Error::Shape("concat of non-vector".into()));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::vector(&data);
        Ok(self.push(Op::Concat(parts.iter().map(|v| v.0).collect()), value))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !t.is_vector() || start + len > t.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) of vector len {}",
                t.len()
            )));
        }
        let value = Tensor::vector(&t.data()[start..start + len]);
        Ok(self.push(Op::Slice(x.0, start, len), value))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !t.is_vector() || t.is_empty() {
            return Err(Error::Shape("log_softmax needs a non-empty vector".into()));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + t.data()
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<f64>()
                .ln();
        let value = t.map(|v| v - lse);
        Ok(self.push(Op::LogSoftmax(x.0), value))
    }

    /// Mean of `(a - b)^2` over all entries, the workhorse reconstruction
    /// and TD-error reduction.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from the scalar `loss`. Adjoints of parameter leaves
    /// are added into the gradient slots of whichever of `stores` owns
    /// them; leaves belonging to stores not in the list are left alone,
    /// which is how a loss is detached from part of its graph. The tape is
    /// consumed: afterwards it is empty and all `Var`s are dead.
    pub fn backward(&mut self, loss: Var, stores: &mut [&mut ParameterStore]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Numeric("backward on an empty tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                loss_value.shape()
            )));
        }
        if !loss_value.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Split so parent adjoints can be written while reading node i.
            let (before, rest) = self.nodes.split_at(i);
            let node = &rest[0];
            let send = |target: usize, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                match &mut grads[target] {
                    Some(t) => t.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for store in stores.iter_mut() {
                        if store.store_id() == id.store {
                            store.accumulate_grad(id.index, &g);
                            break;
                        }
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.map(|v| -v), &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&before[*b].value, |gi, bv| gi * bv)?;
                    let db = g.zip(&before[*a].value, |gi, av| gi * av)?;
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Div(a, b) => {
                    let bv = &before[*b].value;
                    let da = g.zip(bv, |gi, b| gi / b)?;
                    let av = &before[*a].value;
                    let mut db = g.zip(av, |gi, a| gi * a)?;
                    for (d, b) in db.data_mut().iter_mut().zip(bv.data()) {
                        *d = -*d / (b * b);
                    }
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::MinElem(a, b) => {
                    let (av, bv) = (&before[*a].value, &before[*b].value);
                    let da = g
                        .zip(av, |gi, _| gi)?
                        .zip(&av.zip(bv, |x, y| if x <= y { 1.0 } else { 0.0 })?, |gi, m| {
                            gi * m
                        })?;
                    let db = g.zip(&av.zip(bv, |x, y| if y < x { 1.0 } else { 0.0 })?, |gi, m| {
                        gi * m
                    })?;
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    let da = before[*b].value.map(|v| s * v);
                    let db = before[*a].value.map(|v| s * v);
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::MatVec(w, x) => {
                    let xv = &before[*x].value;
                    let wv = &before[*w].value;
                    let (rows, cols) = wv.shape();
                    let mut dw = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = g.data()[r];
                        for c in 0..cols {
                            dw[r * cols + c] = gr * xv.data()[c];
                        }
                    }
                    let mut dx = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.data()[r];
                        for c in 0..cols {
                            dx[c] += wv.at(r, c) * gr;
                        }
                    }
                    send(*w, Tensor::matrix(rows, cols, dw)?, &mut grads);
                    send(*x, Tensor::vector(&dx), &mut grads);
                }
                Op::Affine(x, scale) => {
                    send(*x, g.map(|v| v * scale), &mut grads);
                }
                Op::AffineVec(x, scale) => {
                    let mut d = g.clone();
                    for (v, s) in d.data_mut().iter_mut().zip(scale) {
                        *v *= s;
                    }
                    send(*x, d, &mut grads);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = &before[*x].value;
                    let mut d = g.clone();
                    for ((v, &xi), (&l, &h)) in
                        d.data_mut().iter_mut().zip(xv.data()).zip(lo.iter().zip(hi))
                    {
                        if xi < l || xi > h {
                            *v = 0.0;
                        }
                    }
                    send(*x, d, &mut grads);
                }
                Op::Tanh(x) => {
                    let d = g.zip(&node.value, |gi, y| gi * (1.0 - y * y))?;
                    send(*x, d, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip(&node.value, |gi, y| gi * y * (1.0 - y))?;
                    send(*x, d, &mut grads);
                }
                Op::Relu(x) => {
                    let d = g.zip(&before[*x].value, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    send(*x, d, &mut grads);
                }
                Op::Softplus(x) => {
                    let d = g.zip(&before[*x].value, |gi, xi| gi * sigmoid(xi))?;
                    send(*x, d, &mut grads);
                }
                Op::Exp(x) => {
                    let d = g.zip(&node.value, |gi, y| gi * y)?;
                    send(*x, d, &mut grads);
                }
                Op::Ln(x) => {
                    let d = g.zip(&before[*x].value, |gi, xi| gi / xi)?;
                    send(*x, d, &mut grads);
                }
                Op::Sqrt(x) => {
                    let d = g.zip(&node.value, |gi, y| if y > 0.0 { gi * 0.5 / y } else { 0.0 })?;
                    send(*x, d, &mut grads);
                }
                Op::Square(x) => {
                    let d = g.zip(&before[*x].value, |gi, xi| gi * 2.0 * xi)?;
                    send(*x, d, &mut grads);
                }
                Op::Sum(x) => {
                    let s = g.item();
                    send(*x, before[*x].value.map(|_| s), &mut grads);
                }
                Op::Mean(x) => {
                    let n = before[*x].value.len().max(1) as f64;
                    let s = g.item() / n;
                    send(*x, before[*x].value.map(|_| s), &mut grads);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = before[p].value.len();
                        let d = Tensor::vector(&g.data()[offset..offset + len]);
                        send(p, d, &mut grads);
                        offset += len;
                    }
                }
                Op::Slice(x, start, len) => {
                    let mut d = Tensor::zeros(before[*x].value.rows(), 1);
                    d.data_mut()[*start..*start + *len].copy_from_slice(g.data());
                    send(*x, d, &mut grads);
                }
                Op::LogSoftmax(x) => {
                    let gsum: f64 = g.data().iter().sum();
                    let d = g.zip(&node.value, |gi, yi| gi - yi.exp() * gsum)?;
                    send(*x, d, &mut grads);
                }
            }
        }

        for store in stores.iter_mut() {
            store.mark_fresh();
        }
        self.nodes.clear();
        Ok(())
    }
}
