//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, ConvGeometry, Real, Shape, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: ConvGeometry,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Upsample(usize, usize),
    AvgPool2(usize),
    Concat(Vec<usize>),
    Mean(usize),
    MeanPerSample(usize),
    Abs(usize),
    Square(usize),
    Log10(usize),
    ClampMin(usize, f64),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var<'_, T> {
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

    /// Leaf whose gradient is tracked.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracks(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a one-element `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |p: usize| nodes[p].requires_grad;
            let val = |p: usize| &*nodes[p].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, geo } => {
                    let (gx, gw, gb) = tensor::conv2d_backward(
                        val(*x),
                        val(*w),
                        &g,
                        *geo,
                        needs(*x),
                        needs(*w),
                        b.is_some_and(needs),
                    );
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads, *w, gw);
                    }
                    if let (Some(gb), Some(b)) = (gb, b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |gv, bv| gv * bv));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g.zip_map(val(*a), |gv, av| gv * av));
                    }
                }
                Op::Scale(a, s) => {
                    let s = T::of(*s);
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let slope = T::of(*slope);
                    let gi = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { gv * slope });
                    acc(&mut grads, *a, gi);
                }
                Op::Upsample(a, f) => acc(&mut grads, *a, tensor::upsample_nearest_backward(&g, *f)),
                Op::AvgPool2(a) => {
                    let shape = val(*a).shape();
                    acc(&mut grads, *a, tensor::avg_pool2_backward(&g, shape));
                }
                Op::Concat(parts) => {
                    let chans: Vec<usize> = parts.iter().map(|&p| val(p).shape().c).collect();
                    for (&p, gp) in parts.iter().zip(tensor::split_channels(&g, &chans)) {
                        if needs(p) {
                            acc(&mut grads, p, gp);
                        }
                    }
                }
                Op::Mean(a) => {
                    let shape = val(*a).shape();
                    let gv = g.item() / T::of(shape.numel() as f64);
                    acc(&mut grads, *a, Tensor::full(shape, gv));
                }
                Op::MeanPerSample(a) => {
                    let shape = val(*a).shape();
                    let len = shape.sample_len();
                    let inv = T::one() / T::of(len as f64);
                    let mut gi = Tensor::zeros(shape);
                    for (chunk, &gv) in gi.data_mut().chunks_mut(len).zip(g.data()) {
                        chunk.fill(gv * inv);
                    }
                    acc(&mut grads, *a, gi);
                }
                Op::Abs(a) => {
                    let gi = g.zip_map(val(*a), |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads, *a, gi);
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    acc(&mut grads, *a, g.zip_map(val(*a), |gv, x| gv * two * x));
                }
                Op::Log10(a) => {
                    let ln10 = T::of(std::f64::consts::LN_10);
                    acc(&mut grads, *a, g.zip_map(val(*a), |gv, x| gv / (x * ln10)));
                }
                Op::ClampMin(a, floor) => {
                    let floor = T::of(*floor);
                    acc(&mut grads, *a, g.zip_map(val(*a), |gv, x| if x > floor { gv } else { T::zero() }));
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tracks(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op) -> Self {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g, T>, value: Tensor<T>, op: Op) -> Self {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'g, T>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: operand shapes differ");
    }

    pub fn conv2d(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, geo: ConvGeometry) -> Self {
        let bias_val = bias.map(|b| b.value());
        let out = tensor::conv2d(&self.value(), &weight.value(), bias_val.as_deref(), geo)
            .unwrap_or_else(|e| panic!("conv2d: {e}"));
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.graph.push(
            out,
            Op::Conv {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geo,
            },
            rg,
        )
    }

    pub fn add(&self, other: Var<'g, T>) -> Self {
        self.same_shape(&other, "add");
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Self {
        self.same_shape(&other, "sub");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Self {
        self.same_shape(&other, "mul");
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Self {
        let st = T::of(s);
        let v = self.value().map(|a| a * st);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        let st = T::of(s);
        let v = self.value().map(|a| a + st);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        let st = T::of(slope);
        let v = self.value().map(|a| if a > T::zero() { a } else { a * st });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(0.0)
    }

    pub fn upsample_nearest(&self, factor: usize) -> Self {
        let v = tensor::upsample_nearest(&self.value(), factor);
        self.unary(v, Op::Upsample(self.id, factor))
    }

    pub fn avg_pool2(&self) -> Self {
        let v = tensor::avg_pool2(&self.value());
        self.unary(v, Op::AvgPool2(self.id))
    }

    pub fn concat(parts: &[Var<'g, T>]) -> Self {
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let v = tensor::concat_channels(&refs).unwrap_or_else(|e| panic!("concat: {e}"));
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(v, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn mean(&self) -> Self {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Mean over everything but the batch axis, giving `n × 1 × 1 × 1`.
    pub fn mean_per_sample(&self) -> Self {
        let value = self.value();
        let s = value.shape();
        let len = T::of(s.sample_len() as f64);
        let data = (0..s.n).map(|n| value.sample(n).iter().copied().sum::<T>() / len).collect();
        let v = Tensor::from_vec(Shape::new(s.n, 1, 1, 1), data).expect("per-sample shape");
        self.unary(v, Op::MeanPerSample(self.id))
    }

    pub fn abs(&self) -> Self {
        let v = self.value().map(|a| a.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(&self) -> Self {
        let v = self.value().map(|a| a * a);
        self.unary(v, Op::Square(self.id))
    }

    pub fn log10(&self) -> Self {
        let v = self.value().map(|a| a.log10());
        self.unary(v, Op::Log10(self.id))
    }

    pub fn clamp_min(&self, floor: f64) -> Self {
        let f = T::of(floor);
        let v = self.value().map(|a| if a > f { a } else { f });
        self.unary(v, Op::ClampMin(self.id, floor))
    }

    /// Scalar value of a one-element var as `f64`.
    pub fn item(&self) -> f64 {
        self.value().item().as_f64()
    }
}

pub mod gradcheck {
    //! Central-difference gradient oracle.

    use super::*;

    /// Numerical gradient of `f` at `x` with step `eps`.
    pub fn numerical(x: &Tensor<f64>, eps: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let mut grad = Tensor::zeros(x.shape());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        grad
    }

    /// Max relative error, normalising by the larger gradient magnitude.
    pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        analytic.max_abs_diff(numeric) / scale
    }
}
