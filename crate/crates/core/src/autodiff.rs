//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed through it. [`Graph::backward`]
//! replays the tape in exact reverse order, summing each node's gradient over
//! all of its consumers, and accumulates parameter gradients into the
//! [`ParamStore`] the parameters were bound from. Every forward operation
//! checks its result for NaN/Inf and faults with the operation's name.

use crate::scalar::Scalar;
use crate::tensor::{
    self, check_axes, reduce_to_shape, reduction_layout, reduction_offsets, zip_broadcast, Result,
    Tensor, TensorError,
};

/// Handle to a value slot on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Whether the optimizer applies weight decay to this parameter.
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            decay: false,
        }
    }
}

/// Owned collection of parameters. Gradients are only ever cleared by
/// [`ParamStore::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, param: Parameter<T>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(Parameter::new(name, value))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// L2 norm of all trainable gradients taken together.
    pub fn global_grad_norm(&self) -> T {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.squared_norm())
            .sum::<T>()
            .sqrt()
    }
}

/// Scales all trainable gradients by `max_norm / g` when their global L2 norm
/// `g` exceeds `max_norm`. Returns the factor applied (1 when unchanged).
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: T) -> T {
    let norm = store.global_grad_norm();
    // Slack of a few ulps so that a second application is a no-op.
    if norm <= max_norm * (T::one() + T::lit(4.0) * T::epsilon()) {
        return T::one();
    }
    let factor = max_norm / norm;
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.grad.scale_in_place(factor);
    }
    factor
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Exp(Var),
    Log(Var),
    Powi(Var, i32),
    Neg(Var),
    LeakyRelu(Var),
    Scale(Var, T),
    Offset(Var),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>, usize),
    Max(Var, Vec<usize>),
    LogSumExp(Var, usize),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Slope of the leaky rectifier on the negative half-line.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A tape of executed operations. Single-owner; build one per step.
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded value slot.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Leaf whose gradient is tracked (for probing input sensitivities).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        let value = value.check_finite("input")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.derived("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.derived("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.derived("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.derived("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.derived("matmul", v, Op::Matmul(a, b), &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.derived("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        let v = self.value(a).map(T::ln);
        self.derived("log", v, Op::Log(a), &[a])
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Result<Var> {
        let v = self.value(a).map(|x| x.powi(n));
        self.derived("powi", v, Op::Powi(a, n), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.derived("neg", v, Op::Neg(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let slope = T::lit(LEAKY_SLOPE);
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { slope * x });
        self.derived("leaky_relu", v, Op::LeakyRelu(a), &[a])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.derived("scale", v, Op::Scale(a, c), &[a])
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.derived("offset", v, Op::Offset(a), &[a])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let v = tensor::reduce_sum(self.value(a), axes, keepdim)?;
        let axes = check_axes("sum", self.shape(a), axes)?;
        self.derived("sum", v, Op::Sum(a, axes), &[a])
    }

    /// Sum over every axis, yielding a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.sum(a, &axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let axes = check_axes("mean", self.shape(a), axes)?;
        let count: usize = axes.iter().map(|&d| self.shape(a)[d]).product();
        let inv = T::one() / T::lit(count as f64);
        let v = tensor::reduce_sum(self.value(a), &axes, keepdim)?.map(|x| x * inv);
        self.derived("mean", v, Op::Mean(a, axes, count), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.mean(a, &axes, false)
    }

    pub fn max(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let v = tensor::reduce_max(self.value(a), axes, keepdim)?;
        let axes = check_axes("max", self.shape(a), axes)?;
        self.derived("max", v, Op::Max(a, axes), &[a])
    }

    /// Numerically stable `ln Σ exp` along `axis`, shifted by the axis maximum.
    pub fn logsumexp(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = tensor::logsumexp(self.value(a), axis, keepdim)?;
        self.derived("logsumexp", v, Op::LogSumExp(a, axis), &[a])
    }

    /// `a - logsumexp(a, axis)`, broadcast back over `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lse = self.logsumexp(a, axis, true)?;
        self.sub(a, lse)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ls = self.log_softmax(a, axis)?;
        self.exp(ls)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.derived("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.derived("transpose", v, Op::Transpose(a), &[a])
    }

    /// Selects first-axis slices by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(idx)?;
        self.derived("gather_rows", v, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// For a matrix `a[n×k]`, returns the vector `a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let k = t.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= k {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    extent: k,
                });
            }
            data.push(t.data()[i * k + j]);
        }
        let v = Tensor::vector(data);
        self.derived("pick", v, Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are added to `store`; nothing is zeroed here.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward_only(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn backward_only(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        contribution: Tensor<T>,
    ) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)))?;
                self.accumulate(grads, *b, reduce_to_shape(g, self.shape(*b)))?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)))?;
                let gb = reduce_to_shape(g, self.shape(*b)).map(|x| -x);
                self.accumulate(grads, *b, gb)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = zip_broadcast("mul_grad", g, bv, |x, y| x * y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&ga, av.shape()))?;
                }
                if self.nodes[b.0].requires_grad {
                    let gb = zip_broadcast("mul_grad", g, av, |x, y| x * y)?;
                    self.accumulate(grads, *b, reduce_to_shape(&gb, bv.shape()))?;
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = zip_broadcast("div_grad", g, bv, |x, y| x / y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&ga, av.shape()))?;
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -out / b
                    let t = zip_broadcast("div_grad", out, bv, |o, y| -o / y)?;
                    let gb = zip_broadcast("div_grad", g, &t, |x, y| x * y)?;
                    self.accumulate(grads, *b, reduce_to_shape(&gb, bv.shape()))?;
                }
            }
            Op::Matmul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Exp(a) => {
                let ga = zip_broadcast("exp_grad", g, out, |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Log(a) => {
                let ga = zip_broadcast("log_grad", g, self.value(*a), |x, y| x / y)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Powi(a, n) => {
                let n = *n;
                let c = T::lit(f64::from(n));
                let ga =
                    zip_broadcast("powi_grad", g, self.value(*a), |x, y| x * c * y.powi(n - 1))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x))?,
            Op::LeakyRelu(a) => {
                let slope = T::lit(LEAKY_SLOPE);
                let ga = zip_broadcast("leaky_relu_grad", g, self.value(*a), |x, y| {
                    if y > T::zero() {
                        x
                    } else {
                        x * slope
                    }
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c))?;
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Sum(a, axes) => {
                let ga = self.expand_reduced(*a, axes, g, |_, gv| gv);
                self.accumulate(grads, *a, ga)?;
            }
            Op::Mean(a, axes, count) => {
                let inv = T::one() / T::lit(*count as f64);
                let ga = self.expand_reduced(*a, axes, g, |_, gv| gv * inv);
                self.accumulate(grads, *a, ga)?;
            }
            Op::Max(a, axes) => {
                let av = self.value(*a);
                let (_, map) = reduction_layout(av.shape(), axes, true);
                let offs = reduction_offsets(av.shape(), &map);
                let mut taken = vec![false; out.len()];
                let mut ga = Tensor::zeros(av.shape());
                for (j, &o) in offs.iter().enumerate() {
                    if !taken[o] && av.data()[j] == out.data()[o] {
                        taken[o] = true;
                        ga.data_mut()[j] = g.data()[o];
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LogSumExp(a, axis) => {
                let av = self.value(*a);
                let (_, map) = reduction_layout(av.shape(), &[*axis], true);
                let offs = reduction_offsets(av.shape(), &map);
                let mut ga = Tensor::zeros(av.shape());
                for (j, &o) in offs.iter().enumerate() {
                    ga.data_mut()[j] = g.data()[o] * (av.data()[j] - out.data()[o]).exp();
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Reshape(a) => {
                let ga = g.reshape(self.shape(*a))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let width = if av.shape().is_empty() {
                    1
                } else {
                    tensor::numel(&av.shape()[1..])
                };
                let mut ga = Tensor::zeros(av.shape());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[src * width..(src + 1) * width];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Pick(a, idx) => {
                let av = self.value(*a);
                let k = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (r, &j) in idx.iter().enumerate() {
                    ga.data_mut()[r * k + j] += g.data()[r];
                }
                self.accumulate(grads, *a, ga)?;
            }
        }
        Ok(())
    }

    /// Spreads a reduced gradient back over the input shape of `a`.
    fn expand_reduced(
        &self,
        a: Var,
        axes: &[usize],
        g: &Tensor<T>,
        f: impl Fn(usize, T) -> T,
    ) -> Tensor<T> {
        let shape = self.shape(a);
        let (_, map) = reduction_layout(shape, axes, true);
        let offs = reduction_offsets(shape, &map);
        let data = offs
            .iter()
            .enumerate()
            .map(|(j, &o)| f(j, g.data()[o]))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("reduction layout preserves element count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[1], &[10.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 12.0, 13.0]);

        let x = g.constant(t(&[2], &[4.0, 9.0]));
        let y = g.constant(t(&[2], &[2.0, 3.0]));
        let q = g.div(x, y).unwrap();
        assert_eq!(g.value(q).data(), &[2.0, 3.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[2.0])).unwrap();
        let b = g.input(t(&[1], &[5.0])).unwrap();
        let p = g.mul(a, b).unwrap();
        let l = g.sum_all(p).unwrap();
        let grads = g.backward_only(l).unwrap();
        assert_eq!(grads.wrt(a).data(), &[5.0]);
        assert_eq!(grads.wrt(b).data(), &[2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[0.0]);

        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn map_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).data(), &[1.0]);

        let x = g.input(t(&[1], &[3.0])).unwrap();
        let sq = g.powi(x, 2).unwrap();
        assert_eq!(g.value(sq).data(), &[9.0]);
        let l = g.sum_all(sq).unwrap();
        assert_eq!(g.backward_only(l).unwrap().wrt(x).data(), &[6.0]);

        for &v in &[-3.5, 0.2, 17.0] {
            let x = g.constant(t(&[1], &[v]));
            let e = g.exp(x).unwrap();
            let back = g.log(e).unwrap();
            assert!((g.value(back).data()[0] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert_eq!(g.log(x), Err(TensorError::Domain { op: "log" }));
    }

    #[test]
    fn non_finite_faults_with_op_name() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert_eq!(g.exp(x), Err(TensorError::NonFinite { op: "exp" }));
        let one = g.constant(t(&[1], &[1.0]));
        let zero = g.constant(t(&[1], &[0.0]));
        assert_eq!(g.div(one, zero), Err(TensorError::NonFinite { op: "div" }));
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let m = g.mean(x, &[0], false).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.0);
        let grads = g.backward_only(m).unwrap();
        for &d in grads.wrt(x).data() {
            assert!((d - 1.0 / 3.0).abs() < 1e-15);
        }

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(a, &[0], false).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let e = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(
            g.mean(e, &[0], false),
            Err(TensorError::EmptyReduction { .. })
        ));
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[4], &[1.0, 5.0, 5.0, 2.0])).unwrap();
        let m = g.max(x, &[0], false).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 5.0);
        let grads = g.backward_only(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn logsumexp_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1000.0, 1000.0]));
        let l = g.logsumexp(a, 0, false).unwrap();
        assert!((g.value(l).item().unwrap() - 1_000.693_147_180_56).abs() < 1e-9);
        let z = g.constant(t(&[4], &[0.0; 4]));
        let l = g.logsumexp(z, 0, false).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64(&[2, 3], &[0.5; 6]).unwrap());
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let l = g.sum_all(p).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0; 6]);
    }

    #[test]
    fn two_consumers_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::vector(vec![2.0]));
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let a = g.scale(p, 3.0).unwrap();
        let b = g.powi(p, 2).unwrap();
        let s = g.add(a, b).unwrap();
        let l = g.sum_all(s).unwrap();
        g.backward(l, &mut store).unwrap();
        // 3 + 2p
        assert_eq!(store.grad(id).data(), &[7.0]);
        // a second backward adds on top; zeroing is explicit.
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[14.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(
            g.backward(x, &mut store),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn clip_examples() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::zeros(&[2]));
        store.get_mut(id).grad = t(&[2], &[3.0, 4.0]);
        let f = clip_global_norm(&mut store, 1.0);
        assert!((f - 0.2).abs() < 1e-15);
        let gd = store.grad(id).data();
        assert!((gd[0] - 0.6).abs() < 1e-15 && (gd[1] - 0.8).abs() < 1e-15);

        store.get_mut(id).grad = t(&[2], &[0.3, 0.4]);
        assert_eq!(clip_global_norm(&mut store, 1.0), 1.0);
        assert_eq!(store.grad(id).data(), &[0.3, 0.4]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::vector(vec![1.0]));
        store.get_mut(id).trainable = false;
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let l = g.sum_all(p).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[0.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::vector(vec![1.0f32, 2.0])).unwrap();
        let l = g.logsumexp(x, 0, false).unwrap();
        let grad = g.backward_only(l).unwrap().wrt(x);
        assert!((grad.sum_all() - 1.0).abs() < 1e-6);
    }
}
