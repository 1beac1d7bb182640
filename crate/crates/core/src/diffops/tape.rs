//! Reverse-mode differentiation over a linear record of executed primitives.
//!
//! Every primitive evaluates eagerly, stores its output on the tape, and
//! keeps whatever it needs to produce input gradients later. `backward`
//! walks the record once in reverse.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor};

use super::{activation, conv, linalg, losses, norm};

/// Marks a zero-filled position in a gather index.
pub const PAD: usize = usize::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    LayerNorm { x: Var, g: Var, b: Var, saved: norm::NormSaved<T> },
    InstanceNorm { x: Var, g: Var, b: Var, saved: norm::NormSaved<T> },
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    LeakyRelu(Var, T),
    Conv3d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT3d { x: Var, w: Var, b: Option<Var>, stride: usize },
    AvgPool(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    L1 { x: Var, target: Arc<Tensor<T>> },
    CrossEntropy { x: Var, axis: usize, labels: Arc<[usize]>, probs: Tensor<T> },
    SoftDice { x: Var, labels: Arc<[usize]>, saved: losses::DiceSaved<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Record of one forward evaluation. Confined to a single training step.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter id, summed over every leaf that referenced it.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn same_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), false, None)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), true, None)
    }

    /// A trainable parameter leaf; shares storage with the parameter store.
    pub fn param(&mut self, id: ParamId, value: Arc<Tensor<T>>) -> Var {
        self.leaf(value, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims(va, vb, "add")?;
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b` matches the trailing dims of `a` and is broadcast
    /// over the leading ones.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.dims().ends_with(vb.dims()) {
            return shape_err(format!("add_bias: {:?} is not a suffix of {:?}", vb.dims(), va.dims()));
        }
        let mut out = va.clone();
        let bd = vb.data();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddBias(a, b), &[a, b]))
    }

    /// `a + c` for a constant `c` of the same rank whose extents either
    /// match `a` or are 1 (broadcast).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        let (ad, cd) = (va.dims(), c.dims());
        if ad.len() != cd.len() || ad.iter().zip(cd).any(|(&x, &y)| y != x && y != 1) {
            return shape_err(format!("add_const: {cd:?} does not broadcast to {ad:?}"));
        }
        let mut out = va.clone();
        if ad == cd {
            out.add_assign(c);
        } else {
            let rank = ad.len();
            let mut strides = vec![0; rank];
            let mut s = 1;
            for k in (0..rank).rev() {
                strides[k] = if cd[k] == 1 { 0 } else { s };
                s *= cd[k];
            }
            let mut pos = vec![0; rank];
            let mut ci = 0;
            for o in out.data_mut() {
                *o += c.data()[ci];
                for k in (0..rank).rev() {
                    pos[k] += 1;
                    ci += strides[k];
                    if pos[k] < ad[k] {
                        break;
                    }
                    ci -= strides[k] * pos[k];
                    pos[k] = 0;
                }
            }
        }
        Ok(self.push(out, Op::AddConst(a), &[a]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.dims().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.len()).expect("count"));
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a[idx[i]]` over the flattened data, with [`PAD`] producing zero.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>, dims: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = idx.iter().find(|&&i| i != PAD && i >= src.len()) {
            return shape_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data = idx.iter().map(|&i| if i == PAD { T::zero() } else { src[i] }).collect();
        let out = Tensor::new(dims.to_vec(), data)?;
        Ok(self.push(out, Op::Gather(a, idx), &[a]))
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.dims(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.dims()[1..] != tail[..] {
                return shape_err(format!("concat: trailing dims {:?} vs {:?}", &v.dims()[1..], tail));
            }
            lead += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linalg::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &ins))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = linalg::matmul(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: T) -> Result<Var> {
        let (out, saved) = norm::layer_norm_forward(self.value(x), self.value(g), self.value(b), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, g, b, saved }, &[x, g, b]))
    }

    pub fn instance_norm(&mut self, x: Var, g: Var, b: Var, eps: T) -> Result<Var> {
        let (out, saved) = norm::instance_norm_forward(self.value(x), self.value(g), self.value(b), eps)?;
        Ok(self.push(out, Op::InstanceNorm { x, g, b, saved }, &[x, g, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = activation::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = activation::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = activation::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Conv3d { x, w, b, stride, pad }, &ins))
    }

    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = conv::conv3d_transpose(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::ConvT3d { x, w, b, stride }, &ins))
    }

    /// Mean over all spatial positions of `[C, spatial...]` → `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = super::global_avg_pool(self.value(x));
        self.push(out, Op::AvgPool(x), &[x])
    }

    /// Normalize each row (trailing axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let f = v.last_dim();
        let norms: Vec<T> = v.data().chunks(f).map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt()).collect();
        if norms.iter().any(|&n| n <= T::zero() || !n.is_finite()) {
            return Err(Error::Degenerate("l2_normalize of a zero vector".into()));
        }
        let mut out = v.clone();
        for (row, &n) in out.data_mut().chunks_mut(f).zip(&norms) {
            row.iter_mut().for_each(|a| *a /= n);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    pub fn l1_loss(&mut self, x: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let l = losses::l1_mean(self.value(x), &target)?;
        Ok(self.push(Tensor::scalar(l), Op::L1 { x, target }, &[x]))
    }

    pub fn cross_entropy(&mut self, x: Var, axis: usize, labels: Arc<[usize]>) -> Result<Var> {
        let (l, probs) = losses::cross_entropy_forward(self.value(x), axis, &labels)?;
        Ok(self.push(Tensor::scalar(l), Op::CrossEntropy { x, axis, labels, probs }, &[x]))
    }

    /// Soft Dice loss on channel-major probabilities `[K, spatial...]`.
    pub fn soft_dice(&mut self, probs: Var, labels: Arc<[usize]>) -> Result<Var> {
        let (l, saved) = losses::soft_dice_forward(self.value(probs), &labels)?;
        Ok(self.push(Tensor::scalar(l), Op::SoftDice { x: probs, labels, saved }, &[probs]))
    }

    /// Propagate `d loss / d node` from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.dims(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.dims(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads)?;
        }
        let params = self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (i, p))).collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*b) {
                    let vb = self.value(*b);
                    let mut db = Tensor::zeros(vb.dims());
                    for chunk in g.data().chunks(vb.len()) {
                        for (o, &x) in db.data_mut().iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::AddConst(a) => self.accum(grads, *a, g.clone()),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(va.dims().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(vb.dims().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|v| v * *c)),
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accum(grads, *a, Tensor::full(self.dims(*a), s));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len()).expect("count");
                let s = g.data()[0] / n;
                self.accum(grads, *a, Tensor::full(self.dims(*a), s));
            }
            Op::Reshape(a) => self.accum(grads, *a, g.clone().reshape(self.dims(*a))?),
            Op::Gather(a, idx) => {
                let mut d = Tensor::zeros(self.dims(*a));
                let dd = d.data_mut();
                for (&i, &v) in idx.iter().zip(g.data()) {
                    if i != PAD {
                        dd[i] += v;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let dims = self.dims(p).to_vec();
                    let n = self.value(p).len();
                    if self.wants(p) {
                        self.accum(grads, p, Tensor::new(dims, g.data()[off..off + n].to_vec())?);
                    }
                    off += n;
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    linalg::linear_backward(self.value(*x), self.value(*w), g, self.wants(*x), self.wants(*w));
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accum(grads, *b, db);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (da, db) = linalg::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    *trans_b,
                    g,
                    self.wants(*a),
                    self.wants(*b),
                );
                if let Some(da) = da {
                    self.accum(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accum(grads, *b, db);
                }
            }
            Op::LayerNorm { x, g: gm, b, saved } => {
                let (dx, dg, db) = norm::layer_norm_backward(g, self.value(*gm), saved);
                self.accum(grads, *x, dx);
                self.accum(grads, *gm, dg);
                self.accum(grads, *b, db);
            }
            Op::InstanceNorm { x, g: gm, b, saved } => {
                let (dx, dg, db) = norm::instance_norm_backward(g, self.value(*gm), saved);
                self.accum(grads, *x, dx);
                self.accum(grads, *gm, dg);
                self.accum(grads, *b, db);
            }
            Op::Softmax { x, axis } => {
                self.accum(grads, *x, activation::softmax_backward(out, g, *axis));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = vx.data().iter().zip(g.data()).map(|(&v, &gv)| gv * activation::gelu_grad_scalar(v)).collect();
                self.accum(grads, *x, Tensor::new(vx.dims().to_vec(), d)?);
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                    .collect();
                self.accum(grads, *x, Tensor::new(vx.dims().to_vec(), d)?);
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let cg = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *pad,
                    g,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                if let Some(dx) = cg.dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accum(grads, *b, cg.db);
                }
            }
            Op::ConvT3d { x, w, b, stride } => {
                let cg = conv::conv3d_transpose_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    g,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                if let Some(dx) = cg.dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accum(grads, *b, cg.db);
                }
            }
            Op::AvgPool(x) => {
                let vx = self.value(*x);
                let c = vx.dims()[0];
                let per = vx.len() / c;
                let inv = T::one() / T::from_usize(per).expect("count");
                let d = Tensor::from_fn(vx.dims(), |i| g.data()[i / per] * inv);
                self.accum(grads, *x, d);
            }
            Op::L2Normalize { x, norms } => {
                let f = out.last_dim();
                let mut d = g.clone();
                for ((dr, yr), &n) in d.data_mut().chunks_mut(f).zip(out.data().chunks(f)).zip(norms) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in dr.iter_mut().zip(yr) {
                        *dv = (*dv - yv * dot) / n;
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::L1 { x, target } => {
                self.accum(grads, *x, losses::l1_mean_grad(self.value(*x), target, g.data()[0]));
            }
            Op::CrossEntropy { x, axis, labels, probs } => {
                self.accum(grads, *x, losses::cross_entropy_grad(probs, *axis, labels, g.data()[0]));
            }
            Op::SoftDice { x, labels, saved } => {
                let p = self.value(*x);
                self.accum(grads, *x, losses::soft_dice_grad(p, labels, saved, g.data()[0]));
            }
        }
        Ok(())
    }
}
