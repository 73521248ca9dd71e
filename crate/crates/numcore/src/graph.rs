//! Recorded-operation graph: eager forward evaluation plus a reverse sweep
//! that fills the gradient buffers of every trainable parameter.
//!
//! Node ids are append-ordered, so the node list is already a topological
//! order and backward is a single reverse walk.

use std::collections::BTreeMap;

use crate::conv;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{NumError, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Dense { w: NodeId, b: NodeId, x: NodeId },
    Conv3x3 { w: NodeId, b: NodeId, x: NodeId },
    MaxPool2x2 { x: NodeId, argmax: Vec<u32> },
    Upsample2x2 { x: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Concat { xs: Vec<NodeId> },
    Slice { x: NodeId, start: usize },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: T },
    MeanOverSet { xs: Vec<NodeId> },
    GaussianNll { target: NodeId, mean: NodeId, std: NodeId },
    Mse { target: NodeId, pred: NodeId },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter input. A parameter appears at most once per graph, so the
    /// reverse sweep writes each gradient buffer exactly once.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = params.get(id);
        let n = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn dense(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (ws, bs, xs) = (
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
            self.value(x).shape().to_vec(),
        );
        if ws.len() != 2 || bs.len() != 1 || xs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(NumError::ShapeMismatch {
                op: "dense",
                expected: format!("w (out, in) with in = {:?}, b (out)", xs),
                got: format!("w {:?}, b {:?}, x {:?}", ws, bs, xs),
            });
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let mut out = vec![T::zero(); n_out];
        conv::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n_in,
            n_out,
            &mut out,
        );
        let needs = self.ng(w) || self.ng(b) || self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::Dense { w, b, x }, needs))
    }

    /// 3x3 convolution, stride 1, zero padding 1. x (ic, h, w), w (oc, ic, 3, 3).
    pub fn conv3x3(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (ws, bs, xs) = (
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
            self.value(x).shape().to_vec(),
        );
        let ok = ws.len() == 4
            && ws[2] == 3
            && ws[3] == 3
            && xs.len() == 3
            && ws[1] == xs[0]
            && bs.len() == 1
            && bs[0] == ws[0];
        if !ok {
            return Err(NumError::ShapeMismatch {
                op: "conv3x3",
                expected: format!("w (oc, {}, 3, 3), b (oc), x (ic, h, w)", xs.first().unwrap_or(&0)),
                got: format!("w {:?}, b {:?}, x {:?}", ws, bs, xs),
            });
        }
        let (oc, ic, h, wd) = (ws[0], xs[0], xs[1], xs[2]);
        let mut out = vec![T::zero(); oc * h * wd];
        conv::conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            ic,
            oc,
            h,
            wd,
            &mut out,
        );
        let needs = self.ng(w) || self.ng(b) || self.ng(x);
        Ok(self.push(
            Tensor::new(vec![oc, h, wd], out),
            Op::Conv3x3 { w, b, x },
            needs,
        ))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] % 2 != 0 || xs[2] % 2 != 0 {
            return Err(NumError::ShapeMismatch {
                op: "maxpool2x2",
                expected: "(c, h, w) with even h, w".into(),
                got: format!("{:?}", xs),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![T::zero(); c * (h / 2) * (w / 2)];
        let mut argmax = Vec::new();
        conv::maxpool2x2_forward(self.value(x).data(), c, h, w, &mut out, &mut argmax);
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![c, h / 2, w / 2], out),
            Op::MaxPool2x2 { x, argmax },
            needs,
        ))
    }

    pub fn upsample2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(NumError::ShapeMismatch {
                op: "upsample2x2",
                expected: "(c, h, w)".into(),
                got: format!("{:?}", xs),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        conv::upsample2x2_forward(self.value(x).data(), c, h, w, &mut out);
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], out),
            Op::Upsample2x2 { x },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        let needs = self.ng(x);
        self.push(v, Op::Relu { x }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.tanh());
        let needs = self.ng(x);
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid_scalar);
        let needs = self.ng(x);
        self.push(v, Op::Sigmoid { x }, needs)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus_scalar);
        let needs = self.ng(x);
        self.push(v, Op::Softplus { x }, needs)
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(NumError::InvalidInput {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &id in xs {
            if self.value(id).shape().len() != 1 {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    expected: "1-D inputs".into(),
                    got: format!("{:?}", self.value(id).shape()),
                });
            }
            data.extend_from_slice(self.value(id).data());
        }
        let needs = xs.iter().any(|&id| self.ng(id));
        Ok(self.push(Tensor::vector(data), Op::Concat { xs: xs.to_vec() }, needs))
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 1 || start + len > xs[0] {
            return Err(NumError::InvalidInput {
                op: "slice",
                reason: format!("range {}..{} out of 1-D shape {:?}", start, start + len, xs),
            });
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let needs = self.ng(x);
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.value(x).numel()),
                got: format!("{:?} = {} elements", shape, n),
            });
        }
        let v = self.value(x).clone().reshaped(shape);
        let needs = self.ng(x);
        Ok(self.push(v, Op::Reshape { x }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumError::ShapeMismatch {
                op: "add",
                expected: format!("{:?}", self.value(a).shape()),
                got: format!("{:?}", self.value(b).shape()),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data), Op::Add { a, b }, needs))
    }

    /// Elementwise mul * x + add, both scalars known at record time.
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let v = self.value(x).map(|a| mul * a + add);
        let needs = self.ng(x);
        self.push(v, Op::Affine { x, mul }, needs)
    }

    /// Arithmetic mean of same-shaped tensors (observation aggregation).
    pub fn mean_over_set(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(NumError::InvalidInput {
                op: "mean-over-set",
                reason: "empty set".into(),
            });
        }
        let shape = self.value(xs[0]).shape().to_vec();
        for &id in &xs[1..] {
            if self.value(id).shape() != shape.as_slice() {
                return Err(NumError::ShapeMismatch {
                    op: "mean-over-set",
                    expected: format!("{:?}", shape),
                    got: format!("{:?}", self.value(id).shape()),
                });
            }
        }
        let inv = T::from_f64(1.0 / xs.len() as f64);
        let mut data = vec![T::zero(); self.value(xs[0]).numel()];
        for &id in xs {
            for (d, &s) in data.iter_mut().zip(self.value(id).data()) {
                *d += s;
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let needs = xs.iter().any(|&id| self.ng(id));
        Ok(self.push(
            Tensor::new(shape, data),
            Op::MeanOverSet { xs: xs.to_vec() },
            needs,
        ))
    }

    /// Sum over elements of 0.5 ln(2 pi std^2) + (target - mean)^2 / (2 std^2).
    pub fn gaussian_nll(&mut self, target: NodeId, mean: NodeId, std: NodeId) -> Result<NodeId> {
        let ts = self.value(target).shape().to_vec();
        if self.value(mean).shape() != ts.as_slice() || self.value(std).shape() != ts.as_slice() {
            return Err(NumError::ShapeMismatch {
                op: "gaussian_nll",
                expected: format!("{:?}", ts),
                got: format!(
                    "mean {:?}, std {:?}",
                    self.value(mean).shape(),
                    self.value(std).shape()
                ),
            });
        }
        if let Some((i, &s)) = self
            .value(std)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &s)| s <= T::zero())
        {
            return Err(NumError::NonPositiveStd {
                value: s.as_f64(),
                index: i,
            });
        }
        let half_ln_2pi = T::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = T::from_f64(0.5);
        let mut acc = T::zero();
        for ((&t, &m), &s) in self
            .value(target)
            .data()
            .iter()
            .zip(self.value(mean).data())
            .zip(self.value(std).data())
        {
            let z = (t - m) / s;
            acc += half_ln_2pi + s.ln() + half * z * z;
        }
        let needs = self.ng(mean) || self.ng(std) || self.ng(target);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::GaussianNll { target, mean, std },
            needs,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, target: NodeId, pred: NodeId) -> Result<NodeId> {
        if self.value(target).shape() != self.value(pred).shape() {
            return Err(NumError::ShapeMismatch {
                op: "mse",
                expected: format!("{:?}", self.value(target).shape()),
                got: format!("{:?}", self.value(pred).shape()),
            });
        }
        let n = T::from_f64(self.value(target).numel() as f64);
        let mut acc = T::zero();
        for (&t, &p) in self.value(target).data().iter().zip(self.value(pred).data()) {
            let d = p - t;
            acc += d * d;
        }
        let needs = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(acc / n), Op::Mse { target, pred }, needs))
    }

    /// Reverse sweep from a scalar loss. Gradient buffers of all trainable
    /// parameters are zeroed first, then filled with d loss / d parameter.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        params.zero_grads();

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g),
                Op::Dense { w, b, x } => {
                    let (n_out, n_in) = {
                        let ws = self.value(*w).shape();
                        (ws[0], ws[1])
                    };
                    let mut gx = vec![T::zero(); n_in];
                    let mut gw = vec![T::zero(); n_out * n_in];
                    let mut gb = vec![T::zero(); n_out];
                    conv::dense_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        n_in,
                        n_out,
                        &mut gx,
                        &mut gw,
                        &mut gb,
                    );
                    self.acc(&mut grads, *x, Tensor::vector(gx));
                    self.acc(&mut grads, *w, Tensor::new(vec![n_out, n_in], gw));
                    self.acc(&mut grads, *b, Tensor::vector(gb));
                }
                Op::Conv3x3 { w, b, x } => {
                    let (oc, ic, h, wd) = {
                        let ws = self.value(*w).shape();
                        let xs = self.value(*x).shape();
                        (ws[0], xs[0], xs[1], xs[2])
                    };
                    let mut gx = vec![T::zero(); ic * h * wd];
                    let mut gw = vec![T::zero(); oc * ic * 9];
                    let mut gb = vec![T::zero(); oc];
                    conv::conv3x3_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        ic,
                        oc,
                        h,
                        wd,
                        &mut gx,
                        &mut gw,
                        &mut gb,
                    );
                    self.acc(&mut grads, *x, Tensor::new(vec![ic, h, wd], gx));
                    self.acc(&mut grads, *w, Tensor::new(vec![oc, ic, 3, 3], gw));
                    self.acc(&mut grads, *b, Tensor::vector(gb));
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                    conv::maxpool2x2_backward(g.data(), argmax, gx.data_mut());
                    self.acc(&mut grads, *x, gx);
                }
                Op::Upsample2x2 { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    let mut gx = Tensor::zeros(xs.clone());
                    conv::upsample2x2_backward(g.data(), xs[0], xs[1], xs[2], gx.data_mut());
                    self.acc(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let gx = self.map_grad(*x, &g, |xi, gi| {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[id].value;
                    let gx = zip_map(y, &g, |yi, gi| gi * (T::one() - yi * yi));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    let gx = zip_map(y, &g, |yi, gi| gi * yi * (T::one() - yi));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Softplus { x } => {
                    let gx = self.map_grad(*x, &g, |xi, gi| gi * sigmoid_scalar(xi));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for &xid in xs {
                        let n = self.value(xid).numel();
                        let part = Tensor::vector(g.data()[off..off + n].to_vec());
                        self.acc(&mut grads, xid, part);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                    gx.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                    self.acc(&mut grads, *x, gx);
                }
                Op::Reshape { x } => {
                    let gx = g.clone().reshaped(self.value(*x).shape().to_vec());
                    self.acc(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Affine { x, mul } => {
                    let m = *mul;
                    let gx = g.map(|gi| gi * m);
                    self.acc(&mut grads, *x, gx);
                }
                Op::MeanOverSet { xs } => {
                    let inv = T::from_f64(1.0 / xs.len() as f64);
                    let part = g.map(|gi| gi * inv);
                    for &xid in xs {
                        self.acc(&mut grads, xid, part.clone());
                    }
                }
                Op::GaussianNll { target, mean, std } => {
                    let gs = g.item();
                    let (tv, mv, sv) = (
                        self.value(*target).data(),
                        self.value(*mean).data(),
                        self.value(*std).data(),
                    );
                    if self.ng(*mean) {
                        let gm: Vec<T> = tv
                            .iter()
                            .zip(mv)
                            .zip(sv)
                            .map(|((&t, &m), &s)| gs * (m - t) / (s * s))
                            .collect();
                        self.acc(
                            &mut grads,
                            *mean,
                            Tensor::new(self.value(*mean).shape().to_vec(), gm),
                        );
                    }
                    if self.ng(*std) {
                        let gstd: Vec<T> = tv
                            .iter()
                            .zip(mv)
                            .zip(sv)
                            .map(|((&t, &m), &s)| {
                                let d = t - m;
                                gs * (T::one() / s - d * d / (s * s * s))
                            })
                            .collect();
                        self.acc(
                            &mut grads,
                            *std,
                            Tensor::new(self.value(*std).shape().to_vec(), gstd),
                        );
                    }
                    if self.ng(*target) {
                        let gt: Vec<T> = tv
                            .iter()
                            .zip(mv)
                            .zip(sv)
                            .map(|((&t, &m), &s)| gs * (t - m) / (s * s))
                            .collect();
                        self.acc(
                            &mut grads,
                            *target,
                            Tensor::new(self.value(*target).shape().to_vec(), gt),
                        );
                    }
                }
                Op::Mse { target, pred } => {
                    let gs = g.item();
                    let n = T::from_f64(self.value(*target).numel() as f64);
                    let two = T::from_f64(2.0);
                    if self.ng(*pred) {
                        let gp: Vec<T> = self
                            .value(*pred)
                            .data()
                            .iter()
                            .zip(self.value(*target).data())
                            .map(|(&p, &t)| gs * two * (p - t) / n)
                            .collect();
                        self.acc(
                            &mut grads,
                            *pred,
                            Tensor::new(self.value(*pred).shape().to_vec(), gp),
                        );
                    }
                    if self.ng(*target) {
                        let gt: Vec<T> = self
                            .value(*pred)
                            .data()
                            .iter()
                            .zip(self.value(*target).data())
                            .map(|(&p, &t)| gs * two * (t - p) / n)
                            .collect();
                        self.acc(
                            &mut grads,
                            *target,
                            Tensor::new(self.value(*target).shape().to_vec(), gt),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(buf) => {
                for (a, b) in buf.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn map_grad<F: Fn(T, T) -> T>(&self, x: NodeId, g: &Tensor<T>, f: F) -> Tensor<T> {
        zip_map(self.value(x), g, f)
    }
}

fn zip_map<T: Real, F: Fn(T, T) -> T>(a: &Tensor<T>, b: &Tensor<T>, f: F) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    // split on sign for numerical stability
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Real>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    let m = if x > T::zero() { x } else { T::zero() };
    m + (-x.abs()).exp().ln_1p()
}
