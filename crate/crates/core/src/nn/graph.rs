//! Tape-based reverse-mode differentiation over the engine's operation set.
//!
//! A [`Graph`] borrows a [`ParamSet`] read-only, records each operation with
//! its forward value, and [`Graph::backward`] walks the tape in reverse.
//! Operations may only reference earlier nodes, so the tape is acyclic by
//! construction. Gradients come back as a detached [`Gradients`] value which
//! the caller folds into the parameters with [`ParamSet::accumulate`]; this
//! keeps per-sample graphs independent so they can run on separate threads.

use super::conv::{self, ConvSpec};
use super::ops;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum_buf: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum_buf = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            momentum_buf,
        }
    }
}

/// Named, ordered collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// `grad += scale * g` for every parameter the gradients touch.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (p, g) in self.params.iter_mut().zip(&grads.per_param) {
            if let Some(g) = g {
                p.grad.add_scaled(g, scale);
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names and values in another precision; gradient and momentum
    /// buffers are reset.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            params: self.params.iter().map(|p| Parameter::new(p.value.cast())).collect(),
        }
    }
}

/// Gradients of one backward pass, indexed like the parameter set.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    per_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.per_param.get(id.0).and_then(Option::as_ref)
    }

    /// `self += other`, entry by entry.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_scaled(b, T::one()),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        out_pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Reparameterize {
        mu: Var,
        logvar: Var,
        eps: Vec<T>,
    },
    BernoulliNll {
        probs: Var,
        target: Vec<T>,
    },
    KlGaussian {
        mu: Var,
        logvar: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        a: Var,
        wa: T,
        b: Var,
        wb: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv3d { x, w, b, .. } | Op::ConvTranspose3d { x, w, b, .. } | Op::Linear { x, w, b } => {
                vec![*x, *w, *b]
            }
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::Clamp { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Reparameterize { mu, logvar, .. } | Op::KlGaussian { mu, logvar } => {
                vec![*mu, *logvar]
            }
            Op::BernoulliNll { probs, .. } => vec![*probs],
            Op::WeightedSum { a, b, .. } => vec![*a, *b],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>) -> Var {
        let id = self.nodes.len();
        // Edges only point backwards, which rules out cycles.
        assert!(
            op.inputs().iter().all(|v| v.0 < id),
            "graph cycle: node {id} references a later node"
        );
        self.nodes.push(Node { op, value });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params.get(*id).value,
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), None)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv3d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(Op::Conv3d { x, w, b, spec }, Some(out)))
    }

    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec, out_pad: usize) -> Result<Var> {
        let out = conv::conv3d_transpose(self.value(x), self.value(w), self.value(b), spec, out_pad)?;
        Ok(self.push(Op::ConvTranspose3d { x, w, b, spec, out_pad }, Some(out)))
    }

    /// `w x + b` on the flattened input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, Some(out)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push(Op::LeakyRelu { x, slope }, Some(out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid { x }, Some(out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, Some(out)))
    }

    /// Contiguous flat range `[start, start + len)` as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if len == 0 || start + len > src.numel() {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} out of {} values",
                start + len,
                src.numel()
            )));
        }
        let out = Tensor::from_vec(src.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { x, start }, Some(out)))
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp { x, lo, hi }, Some(out))
    }

    /// `mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Vec<T>) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.numel() != lv.numel() || m.numel() != eps.len() {
            return Err(Error::ShapeMismatch("reparameterize length mismatch".into()));
        }
        let half = T::lit(0.5);
        let out: Vec<T> = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(&eps)
            .map(|((&m, &l), &e)| m + (l * half).exp() * e)
            .collect();
        Ok(self.push(Op::Reparameterize { mu, logvar, eps }, Some(Tensor::from_vec(out))))
    }

    /// Summed Bernoulli negative log-likelihood of `target` under `probs`.
    pub fn bernoulli_nll(&mut self, probs: Var, target: &[T]) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "probabilities hold {} values, target {}",
                p.numel(),
                target.len()
            )));
        }
        let nll = ops::bernoulli_nll(p.data(), target);
        Ok(self.push(
            Op::BernoulliNll {
                probs,
                target: target.to_vec(),
            },
            Some(Tensor::scalar(nll)),
        ))
    }

    /// `KL(N(mu, exp(logvar)) || N(0, I))`.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.numel() != lv.numel() {
            return Err(Error::ShapeMismatch("kl_gaussian length mismatch".into()));
        }
        let kl = ops::kl_gaussian(m.data(), lv.data());
        Ok(self.push(Op::KlGaussian { mu, logvar }, Some(Tensor::scalar(kl))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum { x }, Some(Tensor::scalar(s)))
    }

    /// `wa * a + wb * b` for two tensors of equal shape.
    pub fn weighted_sum(&mut self, a: Var, wa: T, b: Var, wb: T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weighted_sum of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.map(|v| v * wa);
        out.add_scaled(tb, wb);
        Ok(self.push(Op::WeightedSum { a, wa, b, wb }, Some(out)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        let mut out = Gradients {
            per_param: (0..self.params.len()).map(|_| None).collect(),
        };

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&g, T::one()),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(pid) => match &mut out.per_param[pid.0] {
                    Some(existing) => existing.add_scaled(&g, T::one()),
                    slot => *slot = Some(g),
                },
                Op::Conv3d { x, w, b, spec } => {
                    // Inputs are constants; skip their gradient.
                    let need_x = !matches!(self.nodes[x.0].op, Op::Input);
                    let (gx, gw, gb) = conv::conv3d_backward_opt(self.value(*x), self.value(*w), &g, *spec, need_x)?;
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::ConvTranspose3d { x, w, b, spec, out_pad } => {
                    let (gx, gw, gb) =
                        conv::conv3d_transpose_backward(self.value(*x), self.value(*w), &g, *spec, *out_pad)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, g);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *gv *= *slope;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[id].value.as_ref().expect("sigmoid value");
                    let mut gx = g;
                    for (gv, &s) in gx.data_mut().iter_mut().zip(y.data()) {
                        *gv *= s * (T::one() - s);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshaped(&shape)?);
                }
                Op::Slice { x, start } => {
                    let src = self.value(*x);
                    let mut gx = Tensor::zeros(src.shape());
                    gx.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                    acc(&mut grads, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v < *lo || v > *hi {
                            *gv = T::zero();
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Reparameterize { mu, logvar, eps } => {
                    let lv = self.value(*logvar);
                    let half = T::lit(0.5);
                    let glv: Vec<T> = g
                        .data()
                        .iter()
                        .zip(lv.data())
                        .zip(eps)
                        .map(|((&gz, &l), &e)| gz * e * half * (l * half).exp())
                        .collect();
                    acc(&mut grads, *logvar, Tensor::new(lv.shape().to_vec(), glv)?);
                    let mshape = self.value(*mu).shape().to_vec();
                    acc(&mut grads, *mu, g.reshaped(&mshape)?);
                }
                Op::BernoulliNll { probs, target } => {
                    let p = self.value(*probs);
                    let scale = g.data()[0];
                    let gp: Vec<T> = p
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&f, &x)| scale * ((T::one() - x) / (T::one() - f) - x / f))
                        .collect();
                    acc(&mut grads, *probs, Tensor::new(p.shape().to_vec(), gp)?);
                }
                Op::KlGaussian { mu, logvar } => {
                    let (m, lv) = (self.value(*mu), self.value(*logvar));
                    let scale = g.data()[0];
                    let half = T::lit(0.5);
                    acc(&mut grads, *mu, m.map(|v| scale * v));
                    acc(&mut grads, *logvar, lv.map(|l| scale * half * (l.exp() - T::one())));
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::filled(&shape, g.data()[0]));
                }
                Op::WeightedSum { a, wa, b, wb } => {
                    acc(&mut grads, *a, g.map(|v| v * *wa));
                    acc(&mut grads, *b, g.map(|v| v * *wb));
                }
            }
        }
        Ok(out)
    }
}
