use crate::conv::{fold, unfold, ConvGeom};
use crate::Float;
use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};
use std::cell::Cell;
use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradModeGuard(bool);

impl GradModeGuard {
    fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        GradModeGuard(prev)
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _g = GradModeGuard::set(false);
    f()
}

/// A node in the computation graph. Cheap to clone.
#[derive(Clone)]
pub struct Var<F: Float>(Rc<Node<F>>);

struct Node<F: Float> {
    id: u64,
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

enum Op<F: Float> {
    Leaf,
    Add(Var<F>, Var<F>),
    Sub(Var<F>, Var<F>),
    Mul(Var<F>, Var<F>),
    Div(Var<F>, Var<F>),
    Neg(Var<F>),
    Scale(Var<F>, F),
    AddScalar(Var<F>),
    Exp(Var<F>),
    Log(Var<F>),
    Sqrt(Var<F>),
    Tanh(Var<F>),
    Sigmoid(Var<F>),
    Softplus(Var<F>),
    LeakyRelu(Var<F>, F),
    Abs(Var<F>),
    SumAll(Var<F>),
    BroadcastScalar(Var<F>),
    SumKeepAxis(Var<F>, usize),
    BroadcastAxis(Var<F>, usize),
    MatMul(Var<F>, Var<F>),
    Transpose(Var<F>),
    Reshape(Var<F>),
    Permute(Var<F>, Vec<usize>),
    Unfold(Var<F>, ConvGeom),
    Fold(Var<F>, ConvGeom),
    Concat(Vec<Var<F>>, usize),
    SliceAxis(Var<F>, usize, usize),
    PadAxis(Var<F>, usize, usize),
}

impl<F: Float> Op<F> {
    fn inputs(&self) -> Vec<&Var<F>> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sqrt(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | LeakyRelu(a, _) | Abs(a) | SumAll(a) | BroadcastScalar(a)
            | SumKeepAxis(a, _) | BroadcastAxis(a, _) | Transpose(a) | Reshape(a) | Permute(a, _)
            | Unfold(a, _) | Fold(a, _) | SliceAxis(a, _, _) | PadAxis(a, _, _) => vec![a],
            Concat(parts, _) => parts.iter().collect(),
        }
    }
}

impl<F: Float> fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn zip_map<F: Float>(a: &ArrayD<F>, b: &ArrayD<F>, f: impl Fn(F, F) -> F) -> ArrayD<F> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
}

fn axis_shape(ndim: usize, axis: usize, n: usize) -> Vec<usize> {
    let mut s = vec![1; ndim];
    s[axis] = n;
    s
}

impl<F: Float> Var<F> {
    /// A value that never receives gradients.
    pub fn constant(value: ArrayD<F>) -> Self {
        Self::make(value, Op::Leaf, false)
    }

    /// A leaf that gradients are accumulated into.
    pub fn leaf(value: ArrayD<F>) -> Self {
        Self::make(value, Op::Leaf, true)
    }

    pub fn scalar(x: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    fn make(value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Self {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        Var(Rc::new(Node { id: next_id(), value, op, requires_grad }))
    }

    fn from_op(value: ArrayD<F>, op: Op<F>) -> Self {
        let rg = is_grad_enabled() && op.inputs().iter().any(|v| v.requires_grad());
        if rg {
            Self::make(value, op, true)
        } else {
            Self::make(value, Op::Leaf, false)
        }
    }

    pub fn value(&self) -> &ArrayD<F> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    // ---- elementwise ----

    pub fn add(&self, o: &Self) -> Self {
        Self::from_op(zip_map(self.value(), o.value(), |a, b| a + b), Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::from_op(zip_map(self.value(), o.value(), |a, b| a - b), Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Self) -> Self {
        Self::from_op(zip_map(self.value(), o.value(), |a, b| a * b), Op::Mul(self.clone(), o.clone()))
    }

    pub fn div(&self, o: &Self) -> Self {
        Self::from_op(zip_map(self.value(), o.value(), |a, b| a / b), Op::Div(self.clone(), o.clone()))
    }

    pub fn neg(&self) -> Self {
        Self::from_op(self.value().mapv(|a| -a), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: F) -> Self {
        Self::from_op(self.value().mapv(|a| a * c), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: F) -> Self {
        Self::from_op(self.value().mapv(|a| a + c), Op::AddScalar(self.clone()))
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    pub fn exp(&self) -> Self {
        Self::from_op(self.value().mapv(|a| a.exp()), Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Self {
        Self::from_op(self.value().mapv(|a| a.ln()), Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Self {
        Self::from_op(self.value().mapv(|a| a.sqrt()), Op::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Self {
        Self::from_op(self.value().mapv(|a| a.tanh()), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        Self::from_op(self.value().mapv(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Self {
        Self::from_op(self.value().mapv(softplus), Op::Softplus(self.clone()))
    }

    pub fn leaky_relu(&self, slope: F) -> Self {
        Self::from_op(
            self.value().mapv(|a| if a > F::zero() { a } else { a * slope }),
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn abs(&self) -> Self {
        Self::from_op(self.value().mapv(|a| a.abs()), Op::Abs(self.clone()))
    }

    // ---- reductions and broadcasts ----

    pub fn sum(&self) -> Self {
        Self::from_op(ArrayD::from_elem(IxDyn(&[]), self.value().sum()), Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = F::of(self.len() as f64);
        self.sum().scale(F::one() / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Self {
        Self::from_op(ArrayD::from_elem(IxDyn(shape), self.item()), Op::BroadcastScalar(self.clone()))
    }

    /// Sum over every axis except `axis`; result has shape `[n_axis]`.
    pub fn sum_keep_axis(&self, axis: usize) -> Self {
        let v = self.value();
        let n = v.shape()[axis];
        let out = ArrayD::from_shape_fn(IxDyn(&[n]), |ix| v.index_axis(Axis(axis), ix[0]).sum());
        Self::from_op(out, Op::SumKeepAxis(self.clone(), axis))
    }

    /// Broadcast a `[n]` vector along `axis` of a tensor of `shape`.
    pub fn broadcast_axis(&self, axis: usize, shape: &[usize]) -> Self {
        assert_eq!(self.shape(), &[shape[axis]], "broadcast_axis: length mismatch");
        let v = self
            .value()
            .view()
            .into_shape_with_order(IxDyn(&axis_shape(shape.len(), axis, shape[axis])))
            .expect("reshape for broadcast");
        let out = v.broadcast(IxDyn(shape)).expect("broadcast").to_owned();
        Self::from_op(out, Op::BroadcastAxis(self.clone(), axis))
    }

    /// `self + bias` where `bias` has shape `[shape[axis]]`.
    pub fn add_bias(&self, bias: &Self, axis: usize) -> Self {
        self.add(&bias.broadcast_axis(axis, self.shape()))
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&self, o: &Self) -> Self {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = o.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        Self::from_op(a.dot(&b).into_dyn(), Op::MatMul(self.clone(), o.clone()))
    }

    pub fn t(&self) -> Self {
        assert_eq!(self.shape().len(), 2, "transpose of non-matrix");
        let out = self.value().t().as_standard_layout().into_owned();
        Self::from_op(out, Op::Transpose(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let out = self.value().clone().into_shape_with_order(IxDyn(shape)).expect("reshape: element count mismatch");
        Self::from_op(out, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        let out = self.value().view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        Self::from_op(out, Op::Permute(self.clone(), axes.to_vec()))
    }

    pub fn unfold(&self, g: &ConvGeom) -> Self {
        Self::from_op(unfold(self.value(), g), Op::Unfold(self.clone(), *g))
    }

    pub fn fold(&self, g: &ConvGeom) -> Self {
        Self::from_op(fold(self.value(), g), Op::Fold(self.clone(), *g))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Self {
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        Self::from_op(out, Op::Concat(parts.to_vec(), axis))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let out = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        Self::from_op(out, Op::SliceAxis(self.clone(), axis, start))
    }

    /// Embed into zeros of length `total` along `axis`, at offset `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Self {
        let mut shape = self.shape().to_vec();
        let len = shape[axis];
        shape[axis] = total;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(self.value());
        Self::from_op(out, Op::PadAxis(self.clone(), axis, start))
    }

    // ---- backward ----

    /// Gradients of this tensor (summed over its elements) with respect to
    /// every leaf that requires them.
    pub fn backward(&self) -> Gradients<F> {
        self.grad_impl(false)
    }

    /// Like [`Var::backward`], but the returned gradients are themselves part
    /// of the graph and can be differentiated again.
    pub fn backward_create_graph(&self) -> Gradients<F> {
        self.grad_impl(true)
    }

    fn grad_impl(&self, create_graph: bool) -> Gradients<F> {
        let mut grads: HashMap<u64, Var<F>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: grads };
        }
        let _mode = GradModeGuard::set(create_graph);

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            for inp in v.0.op.inputs() {
                if inp.requires_grad() && !seen.contains(&inp.id()) {
                    stack.push(inp.clone());
                }
            }
            order.push(v);
        }
        // ids increase with creation, so descending id is a topological order
        order.sort_by_key(|v| Reverse(v.id()));

        grads.insert(self.id(), Var::constant(ArrayD::from_elem(self.value().raw_dim(), F::one())));
        let mut leaves = HashMap::new();
        for v in &order {
            let Some(g) = grads.remove(&v.id()) else { continue };
            if v.is_leaf() {
                leaves.insert(v.id(), g);
                continue;
            }
            for (inp, gi) in v.input_grads(&g) {
                if !inp.requires_grad() {
                    continue;
                }
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => prev.add(&gi),
                    None => gi,
                };
                grads.insert(inp.id(), acc);
            }
        }
        Gradients { map: leaves }
    }

    fn input_grads(&self, g: &Var<F>) -> Vec<(Var<F>, Var<F>)> {
        use Op::*;
        let one = F::one();
        match &self.0.op {
            Leaf => vec![],
            Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
            Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
            Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
            Div(a, b) => vec![(a.clone(), g.div(b)), (b.clone(), g.mul(self).div(b).neg())],
            Neg(a) => vec![(a.clone(), g.neg())],
            Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            AddScalar(a) => vec![(a.clone(), g.clone())],
            Exp(a) => vec![(a.clone(), g.mul(self))],
            Log(a) => vec![(a.clone(), g.div(a))],
            Sqrt(a) => vec![(a.clone(), g.div(self).scale(F::of(0.5)))],
            Tanh(a) => {
                let d = self.square().neg().add_scalar(one);
                vec![(a.clone(), g.mul(&d))]
            }
            Sigmoid(a) => {
                let d = self.mul(&self.neg().add_scalar(one));
                vec![(a.clone(), g.mul(&d))]
            }
            Softplus(a) => vec![(a.clone(), g.mul(&a.sigmoid()))],
            LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = a.value().mapv(|x| if x > F::zero() { one } else { s });
                vec![(a.clone(), g.mul(&Var::constant(mask)))]
            }
            Abs(a) => {
                let sign = a.value().mapv(|x| if x > F::zero() { one } else if x < F::zero() { -one } else { F::zero() });
                vec![(a.clone(), g.mul(&Var::constant(sign)))]
            }
            SumAll(a) => vec![(a.clone(), g.broadcast_scalar(a.shape()))],
            BroadcastScalar(a) => vec![(a.clone(), g.sum().reshape(a.shape()))],
            SumKeepAxis(a, axis) => vec![(a.clone(), g.broadcast_axis(*axis, a.shape()))],
            BroadcastAxis(a, axis) => vec![(a.clone(), g.sum_keep_axis(*axis))],
            MatMul(a, b) => vec![(a.clone(), g.matmul(&b.t())), (b.clone(), a.t().matmul(g))],
            Transpose(a) => vec![(a.clone(), g.t())],
            Reshape(a) => vec![(a.clone(), g.reshape(a.shape()))],
            Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(a.clone(), g.permute(&inv))]
            }
            Unfold(a, geom) => vec![(a.clone(), g.fold(geom))],
            Fold(a, geom) => vec![(a.clone(), g.unfold(geom))],
            Concat(parts, axis) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = p.shape()[*axis];
                        let gi = g.narrow(*axis, off, len);
                        off += len;
                        (p.clone(), gi)
                    })
                    .collect()
            }
            SliceAxis(a, axis, start) => vec![(a.clone(), g.pad_axis(*axis, *start, a.shape()[*axis]))],
            PadAxis(a, axis, start) => vec![(a.clone(), g.narrow(*axis, *start, a.shape()[*axis]))],
        }
    }
}

#[inline]
fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Gradients keyed by leaf.
pub struct Gradients<F: Float> {
    map: HashMap<u64, Var<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: &Var<F>) -> Option<&Var<F>> {
        self.map.get(&v.id())
    }

    /// Gradient value, or zeros if `v` did not influence the output.
    pub fn value_or_zeros(&self, v: &Var<F>) -> ArrayD<F> {
        match self.get(v) {
            Some(g) => g.value().clone(),
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }
}
