use std::cell::{Ref, RefCell};
use std::fmt;

use super::array::{validate_shape, DiffArray};
use super::kernels::{self, ConvGeom, Padding};
use super::linalg;
use crate::error::{Error, Result};

/// How the right-hand operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` has one element.
    Scalar,
    /// `b` has one element per channel (axis 1) of `a`.
    Channel {
        channels: usize,
        inner: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Subtract,
    Multiply,
    Square,
    Exponential,
    Logarithm,
    Relu,
}

/// Right-hand side of [`Var::elementwise`].
#[derive(Clone, Copy)]
pub enum Operand<'t> {
    Array(Var<'t>),
    Scalar(f64),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Square,
    Exp,
    Log,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    AddConst {
        a: usize,
    },
    MulConst {
        a: usize,
        c: f64,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Reduce {
        x: usize,
        axes: Vec<usize>,
        scale: f64,
    },
    Reshape {
        x: usize,
    },
    /// Channel slice `[start, start + len)` of an `N x C x ...` array.
    Narrow {
        x: usize,
        start: usize,
        len: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Squeeze {
        x: usize,
        inverse: bool,
    },
    LogAbsDet {
        w: usize,
        inv_t: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations on [`Var`] handles for reverse-mode differentiation.
///
/// A tape is single-threaded: build it, run one forward pass, call
/// [`Tape::backward`], then drop or [`clear`](Tape::clear) it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records `array` as a leaf; gradients flow to it iff `array.requires_grad()`.
    pub fn leaf(&self, array: &DiffArray) -> Var<'_> {
        self.push(array.shape().to_vec(), array.data().to_vec(), Op::Leaf, array.requires_grad())
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&self, array: &DiffArray) -> Var<'_> {
        self.push(array.shape().to_vec(), array.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let a = DiffArray::new(shape, data)?;
        Ok(self.constant(&a))
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Runs the recorded gradient rules in reverse order starting from the
    /// single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Empty("backward on an empty tape".into()));
        }
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: root.shape.clone(),
                reason: "loss must have exactly one element".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => Some(g.unwrap_or_else(|| vec![0.0; n.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, bcast } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * bv[bcast_index(*bcast, i)]).collect(),
                };
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.len()];
                for (i, gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add => *gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * av[i],
                    };
                    gb[bcast_index(*bcast, i)] += d;
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::AddConst { a } => accumulate(grads, nodes, *a, g.to_vec()),
        Op::MulConst { a, c } => accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::Unary { kind, a } => {
            let x = &nodes[*a].value;
            let y = &node.value;
            let ga = match kind {
                UnaryKind::Square => g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect(),
                UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryKind::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            };
            accumulate(grads, nodes, *a, ga);
        }
        Op::MatMul { a, b, m, k, n } => {
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(*m, *n, *k, g, false, &nodes[*b].value, true, 0.0, &mut ga);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(*k, *m, *n, &nodes[*a].value, true, g, false, 0.0, &mut gb);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = kernels::conv2d_backward(
                geom,
                &nodes[*x].value,
                &nodes[*w].value,
                g,
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
            );
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *w, dw);
            }
        }
        Op::Reduce { x, axes, scale } => {
            let (_, map) = kernels::reduction_map(&nodes[*x].shape, axes);
            let gx = map.iter().map(|&o| g[o] * scale).collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Reshape { x } => accumulate(grads, nodes, *x, g.to_vec()),
        Op::Narrow { x, start, len } => {
            let shape = &nodes[*x].shape;
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let mut gx = vec![0.0; nodes[*x].value.len()];
            for b in 0..n {
                let src = &g[b * len * inner..(b + 1) * len * inner];
                let off = (b * c + start) * inner;
                gx[off..off + len * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Concat { a, b } => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let n = sa[0];
            let inner: usize = sa[2..].iter().product();
            let (ca, cb) = (sa[1] * inner, sb[1] * inner);
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * cb);
            for chunk in g.chunks(ca + cb) {
                ga.extend_from_slice(&chunk[..ca]);
                gb.extend_from_slice(&chunk[ca..]);
            }
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Squeeze { x, inverse } => {
            // The adjoint of a permutation is its inverse.
            let gx = if *inverse {
                kernels::squeeze2x2(&node.shape, g, false)
            } else {
                kernels::squeeze2x2(&nodes[*x].shape, g, true)
            };
            accumulate(grads, nodes, *x, gx);
        }
        Op::LogAbsDet { w, inv_t } => {
            let gw = inv_t.iter().map(|v| v * g[0]).collect();
            accumulate(grads, nodes, *w, gw);
        }
    }
}

fn bcast_index(bcast: Broadcast, i: usize) -> usize {
    match bcast {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Channel { channels, inner } => (i / inner) % channels,
    }
}

/// Gradients of one backward pass, stored for every gradient-requiring leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `array`. Leaves the loss did not reach
    /// receive zeros.
    pub fn accumulate_into(&self, var: Var<'_>, array: &mut DiffArray) -> Result<()> {
        if !array.requires_grad() {
            return Ok(());
        }
        match self.wrt(var) {
            Some(g) => array.accumulate_grad(g),
            None => array.accumulate_grad(&vec![0.0; array.numel()]),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.node(self.id).value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    /// A copy of the current value.
    pub fn value(&self) -> Vec<f64> {
        self.value_ref().to_vec()
    }

    /// Borrow of the stored value; must be dropped before recording new ops.
    fn value_ref(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    /// The single value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value_ref()[0]
    }

    pub fn to_array(&self) -> DiffArray {
        let node = self.tape.node(self.id);
        DiffArray::new(node.shape.clone(), node.value.clone()).expect("tape node shape")
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn emit(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'t> {
        self.tape.push(shape, value, op, requires_grad)
    }

    /// Dispatches on `kind`; `rhs` is ignored for unary kinds.
    pub fn elementwise(&self, kind: ElementwiseKind, rhs: Operand<'t>) -> Result<Var<'t>> {
        use ElementwiseKind as K;
        match (kind, rhs) {
            (K::Add, Operand::Array(b)) => self.add(&b),
            (K::Subtract, Operand::Array(b)) => self.sub(&b),
            (K::Multiply, Operand::Array(b)) => self.mul(&b),
            (K::Add, Operand::Scalar(c)) => Ok(self.add_scalar(c)),
            (K::Subtract, Operand::Scalar(c)) => Ok(self.add_scalar(-c)),
            (K::Multiply, Operand::Scalar(c)) => Ok(self.mul_scalar(c)),
            (K::Square, _) => Ok(self.square()),
            (K::Exponential, _) => self.exp(),
            (K::Logarithm, _) => self.ln(),
            (K::Relu, _) => Ok(self.relu()),
            (_, Operand::None) => Err(Error::Config(format!("{kind:?} needs a right-hand operand"))),
        }
    }

    fn binary(&self, other: &Var<'t>, kind: BinaryKind, op_name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let bcast = resolve_broadcast(op_name, &sa, &sb)?;
        let value = {
            let (av, bv) = (self.value_ref(), other.value_ref());
            av.iter()
                .enumerate()
                .map(|(i, x)| {
                    let y = bv[bcast_index(bcast, i)];
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    }
                })
                .collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.emit(sa, value, Op::Binary { kind, a: self.id, b: other.id, bcast }, rg))
    }

    /// Elementwise sum. `other` may match the shape exactly, hold a single
    /// element, or hold one element per channel.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "subtract")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "multiply")
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let value = self.value_ref().iter().map(|x| x + c).collect();
        self.emit(self.shape(), value, Op::AddConst { a: self.id }, self.requires_grad())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        let value = self.value_ref().iter().map(|x| x * c).collect();
        self.emit(self.shape(), value, Op::MulConst { a: self.id, c }, self.requires_grad())
    }

    fn unary(&self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().iter().map(|&x| f(x)).collect();
        self.emit(self.shape(), value, Op::Unary { kind, a: self.id }, self.requires_grad())
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnaryKind::Square, |x| x * x)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        if let Some(x) = self.value_ref().iter().find(|x| !x.exp().is_finite()) {
            return Err(Error::Domain { op: "exponential", reason: format!("exp({x}) overflows") });
        }
        Ok(self.unary(UnaryKind::Exp, f64::exp))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn ln(&self) -> Result<Var<'t>> {
        if let Some(x) = self.value_ref().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain { op: "logarithm", reason: format!("log of non-positive value {x}") });
        }
        Ok(self.unary(UnaryKind::Log, f64::ln))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.value_ref(), false, &other.value_ref(), false, 0.0, &mut out);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.emit(vec![m, n], out, Op::MatMul { a: self.id, b: other.id, m, k, n }, rg))
    }

    /// Stride-1 cross-correlation of an `N x C x H x W` input with an
    /// `O x C x kH x kW` kernel (no kernel flip).
    pub fn conv2d(&self, kernel: &Var<'t>, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(kernel);
        let geom = ConvGeom::new(&self.shape(), &kernel.shape(), padding)?;
        let out = kernels::conv2d_forward(&geom, &self.value_ref(), &kernel.value_ref());
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.emit(geom.out_shape(), out, Op::Conv2d { x: self.id, w: kernel.id, geom }, rg))
    }

    /// Sums or averages over `axes`, removing them from the shape.
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::InvalidAxis { axis: bad, shape });
        }
        let (out_shape, map) = kernels::reduction_map(&shape, &axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let scale = match kind {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean => 1.0 / count as f64,
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, x) in map.iter().zip(self.value_ref().iter()) {
            out[o] += x;
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.emit(out_shape, out, Op::Reduce { x: self.id, axes, scale }, self.requires_grad()))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes).expect("all axes valid")
    }

    pub fn mean_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("all axes valid")
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        validate_shape("reshape", &shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape(), rhs: shape });
        }
        let value = self.value_ref().to_vec();
        Ok(self.emit(shape, value, Op::Reshape { x: self.id }, self.requires_grad()))
    }

    fn channels(&self, op: &'static str) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::InvalidShape { op, shape, reason: "needs a channel axis".into() });
        }
        let inner = shape[2..].iter().product();
        Ok((shape, inner))
    }

    fn narrow(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, inner) = self.channels("narrow")?;
        let (n, c) = (shape[0], shape[1]);
        let value = {
            let v = self.value_ref();
            let mut out = Vec::with_capacity(n * len * inner);
            for b in 0..n {
                let off = (b * c + start) * inner;
                out.extend_from_slice(&v[off..off + len * inner]);
            }
            out
        };
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        Ok(self.emit(out_shape, value, Op::Narrow { x: self.id, start, len }, self.requires_grad()))
    }

    /// Splits the channel axis into its first and second halves.
    pub fn channel_split(&self) -> Result<(Var<'t>, Var<'t>)> {
        let (shape, _) = self.channels("channel_split")?;
        let c = shape[1];
        if c % 2 != 0 {
            return Err(Error::InvalidShape { op: "channel_split", shape, reason: "odd channel count".into() });
        }
        Ok((self.narrow(0, c / 2)?, self.narrow(c / 2, c / 2)?))
    }

    /// Concatenates `self` and `other` along the channel axis.
    pub fn channel_concat(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, inner) = self.channels("channel_concat")?;
        let sb = other.shape();
        if sb.len() != sa.len() || sb[0] != sa[0] || sb[2..] != sa[2..] {
            return Err(Error::ShapeMismatch { op: "channel_concat", lhs: sa, rhs: sb });
        }
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let value = {
            let (av, bv) = (self.value_ref(), other.value_ref());
            let mut out = Vec::with_capacity(av.len() + bv.len());
            for b in 0..sa[0] {
                out.extend_from_slice(&av[b * ca..(b + 1) * ca]);
                out.extend_from_slice(&bv[b * cb..(b + 1) * cb]);
            }
            out
        };
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.emit(shape, value, Op::Concat { a: self.id, b: other.id }, rg))
    }

    /// `N x C x H x W -> N x 4C x H/2 x W/2`; see [`kernels::squeeze2x2`] for
    /// the channel ordering.
    pub fn squeeze2x2(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::InvalidShape { op: "squeeze", shape, reason: "needs NCHW with even H and W".into() });
        }
        let value = kernels::squeeze2x2(&shape, &self.value_ref(), false);
        let out_shape = vec![shape[0], shape[1] * 4, shape[2] / 2, shape[3] / 2];
        Ok(self.emit(out_shape, value, Op::Squeeze { x: self.id, inverse: false }, self.requires_grad()))
    }

    pub fn unsqueeze2x2(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 4 || !shape[1].is_multiple_of(4) {
            return Err(Error::InvalidShape {
                op: "unsqueeze",
                shape,
                reason: "needs NCHW with channels divisible by 4".into(),
            });
        }
        let out_shape = vec![shape[0], shape[1] / 4, shape[2] * 2, shape[3] * 2];
        let value = kernels::squeeze2x2(&out_shape, &self.value_ref(), true);
        Ok(self.emit(out_shape, value, Op::Squeeze { x: self.id, inverse: true }, self.requires_grad()))
    }

    /// `log|det W|` of a square matrix; errors when `|det W| < 1e-12`.
    pub fn log_abs_det(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::InvalidShape { op: "log_abs_det", shape, reason: "needs a square matrix".into() });
        }
        let n = shape[0];
        let (logdet, inv) = linalg::log_abs_det_and_inverse(&self.value_ref(), n)?;
        let inv_t = linalg::transpose(&inv, n, n);
        Ok(self.emit(Vec::new(), vec![logdet], Op::LogAbsDet { w: self.id, inv_t }, self.requires_grad()))
    }
}

fn resolve_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.len() >= 2 {
        let c = a[1];
        let per_channel = b == [c] || (b.len() == a.len() && b[1] == c && bn == c);
        if per_channel {
            return Ok(Broadcast::Channel { channels: c, inner: a[2..].iter().product() });
        }
    }
    Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
}
