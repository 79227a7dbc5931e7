use super::{ParamId, ParamStore, Tensor2D, TensorError};
use crate::Real;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives accepted by [`Tape::elementwise`].
///
/// Binary kinds take two inputs of equal shape, or a second input that is a
/// single `1 × cols` row broadcast over every row of the first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Tanh,
    LeakyRelu { slope: f64 },
    Log,
    Neg,
    Square,
    Sqrt,
    Scale(f64),
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Exp => "exp",
            Elementwise::Tanh => "tanh",
            Elementwise::LeakyRelu { .. } => "leaky_relu",
            Elementwise::Log => "log",
            Elementwise::Neg => "neg",
            Elementwise::Square => "square",
            Elementwise::Sqrt => "sqrt",
            Elementwise::Scale(_) => "scale",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var, bool),
    Unary(Elementwise, Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    PermuteCols(Var, Vec<usize>),
    SumCols(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor2D<T>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Per-parameter gradients returned by [`Tape::backward`], indexed like the
/// [`ParamStore`] they were computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    grads: Vec<Tensor2D<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, t)| Tensor2D::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Tensor2D<T>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D<T> {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor2D<T>> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor2D::is_finite)
    }
}

/// Records primitive operations on dense tensors and propagates gradients
/// back to the trainable parameters they read.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records a tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor2D<T>) -> Var {
        self.push_leaf(value, None)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_leaf(store.get(id).clone(), Some(id))
    }

    fn push_leaf(&mut self, value: Tensor2D<T>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: param.is_some(),
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor2D<T>, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b, _) => self.req(*a) || self.req(*b),
            Op::ConcatCols(parts) => parts.iter().any(|&p| self.req(p)),
            Op::Unary(_, a)
            | Op::SliceCols { src: a, .. }
            | Op::PermuteCols(a, _)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::BroadcastRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.req(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// Records an elementwise primitive over one or two inputs.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.len() != kind.arity() {
            return Err(TensorError::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        if kind.arity() == 2 {
            return self.binary(kind, inputs[0], inputs[1]);
        }
        let a = inputs[0];
        let x = self.value(a);
        let value = match kind {
            Elementwise::Exp => x.map(T::exp_kernel),
            Elementwise::Tanh => x.map(T::tanh_kernel),
            Elementwise::LeakyRelu { slope } => {
                let slope = T::lit(slope);
                x.map(|v| if v > T::zero() { v } else { v * slope })
            }
            Elementwise::Log => {
                if x.data().iter().any(|&v| v <= T::zero()) {
                    return Err(TensorError::LogDomain);
                }
                x.map(T::ln)
            }
            Elementwise::Neg => x.map(|v| -v),
            Elementwise::Square => x.map(|v| v * v),
            Elementwise::Sqrt => {
                if x.data().iter().any(|&v| v < T::zero()) {
                    return Err(TensorError::SqrtDomain);
                }
                x.map(T::sqrt)
            }
            Elementwise::Scale(c) => {
                let c = T::lit(c);
                x.map(|v| v * c)
            }
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => unreachable!(),
        };
        self.push(kind.name(), value, Op::Unary(kind, a))
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var, TensorError> {
        let (xa, xb) = (self.value(a), self.value(b));
        let broadcast = if xa.shape() == xb.shape() {
            false
        } else if xb.rows() == 1 && xb.cols() == xa.cols() {
            true
        } else {
            return Err(TensorError::Shape {
                op: kind.name(),
                lhs: xa.shape(),
                rhs: xb.shape(),
            });
        };
        let f = |p: T, q: T| match kind {
            Elementwise::Add => p + q,
            Elementwise::Sub => p - q,
            _ => p * q,
        };
        let mut value = xa.clone();
        let cols = xa.cols();
        if broadcast {
            for row in value.data_mut().chunks_exact_mut(cols) {
                for (v, &q) in row.iter_mut().zip(xb.data()) {
                    *v = f(*v, q);
                }
            }
        } else {
            for (v, &q) in value.data_mut().iter_mut().zip(xb.data()) {
                *v = f(*v, q);
            }
        }
        self.push(kind.name(), value, Op::Binary(kind, a, b, broadcast))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Exp, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Tanh, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::LeakyRelu { slope }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Log, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Neg, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Square, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Sqrt, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Scale(c), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: x.shape(),
                rhs: (start, len),
            });
        }
        let mut value = Tensor2D::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push("slice_cols", value, Op::SliceCols { src: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(TensorError::Empty("concat_cols")),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut value = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(a);
        if perm.len() != x.cols() || perm.iter().any(|&p| p >= x.cols()) {
            return Err(TensorError::Shape {
                op: "permute_cols",
                lhs: x.shape(),
                rhs: (1, perm.len()),
            });
        }
        let mut value = Tensor2D::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let src = x.row(r);
            for (o, &p) in value.row_mut(r).iter_mut().zip(perm) {
                *o = src[p];
            }
        }
        self.push("permute_cols", value, Op::PermuteCols(a, perm.to_vec()))
    }

    /// Row-wise sum: `K × w` to `K × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        let value = Tensor2D::from_vec(x.rows(), 1, data)?;
        self.push("sum_cols", value, Op::SumCols(a))
    }

    /// Column means: `K × w` to `1 × w`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(TensorError::Empty("mean_rows"));
        }
        let inv = T::one() / T::from_usize(x.rows()).unwrap_or_else(T::one);
        let value = x.sum_rows().map(|v| v * inv);
        self.push("mean_rows", value, Op::MeanRows(a))
    }

    /// Repeats a `1 × w` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(TensorError::Shape {
                op: "broadcast_rows",
                lhs: x.shape(),
                rhs: (rows, x.cols()),
            });
        }
        let mut value = Tensor2D::zeros(rows, x.cols());
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(x.row(0));
        }
        self.push("broadcast_rows", value, Op::BroadcastRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor2D::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let n = x.data().len();
        if n == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let value = Tensor2D::scalar(x.sum() / T::from_usize(n).unwrap_or_else(T::one));
        self.push("mean", value, Op::Mean(a))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    ///
    /// Parameters recorded more than once accumulate their contributions;
    /// parameters the loss does not reach get zero gradient. The tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape.0, shape.1));
        }
        self.consumed = true;

        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor2D<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2D::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(id) = node.param {
                out.grads[id.index()].add_assign(&g);
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor2D<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.matmul_nt(val(*b))?);
                    }
                    if needs(*b) {
                        acc(*b, val(*a).matmul_tn(&g)?);
                    }
                }
                Op::Binary(kind, a, b, broadcast) => {
                    let reduce = |t: Tensor2D<T>| if *broadcast { t.sum_rows() } else { t };
                    let cols = g.cols();
                    match kind {
                        Elementwise::Add => {
                            if needs(*a) {
                                acc(*a, g.clone());
                            }
                            if needs(*b) {
                                acc(*b, reduce(g));
                            }
                        }
                        Elementwise::Sub => {
                            if needs(*a) {
                                acc(*a, g.clone());
                            }
                            if needs(*b) {
                                acc(*b, reduce(g.map(|v| -v)));
                            }
                        }
                        _ => {
                            let (xa, xb) = (val(*a), val(*b));
                            if needs(*a) {
                                let mut ga = g.clone();
                                if *broadcast {
                                    for row in ga.data_mut().chunks_exact_mut(cols) {
                                        for (v, &q) in row.iter_mut().zip(xb.data()) {
                                            *v = *v * q;
                                        }
                                    }
                                } else {
                                    for (v, &q) in ga.data_mut().iter_mut().zip(xb.data()) {
                                        *v = *v * q;
                                    }
                                }
                                acc(*a, ga);
                            }
                            if needs(*b) {
                                acc(*b, reduce(g.zip_map(xa, |p, q| p * q)));
                            }
                        }
                    }
                }
                Op::Unary(kind, a) => {
                    if needs(*a) {
                        let x = val(*a);
                        let y = &node.value;
                        let ga = match *kind {
                            Elementwise::Exp => g.zip_map(y, |p, q| p * q),
                            Elementwise::Tanh => g.zip_map(y, |p, q| p * (T::one() - q * q)),
                            Elementwise::LeakyRelu { slope } => {
                                let slope = T::lit(slope);
                                g.zip_map(x, |p, q| if q > T::zero() { p } else { p * slope })
                            }
                            Elementwise::Log => g.zip_map(x, |p, q| p / q),
                            Elementwise::Neg => g.map(|p| -p),
                            Elementwise::Square => g.zip_map(x, |p, q| p * (q + q)),
                            Elementwise::Sqrt => g.zip_map(y, |p, q| p / (q + q)),
                            Elementwise::Scale(c) => {
                                let c = T::lit(c);
                                g.map(|p| p * c)
                            }
                            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => unreachable!(),
                        };
                        acc(*a, ga);
                    }
                }
                Op::SliceCols { src, start } => {
                    if needs(*src) {
                        let (rows, cols) = val(*src).shape();
                        let mut ga = Tensor2D::zeros(rows, cols);
                        for r in 0..rows {
                            ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                        }
                        acc(*src, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (rows, cols) = val(p).shape();
                        if needs(p) {
                            let mut gp = Tensor2D::zeros(rows, cols);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                            }
                            acc(p, gp);
                        }
                        at += cols;
                    }
                }
                Op::PermuteCols(a, perm) => {
                    if needs(*a) {
                        let mut ga = Tensor2D::zeros(g.rows(), g.cols());
                        for r in 0..g.rows() {
                            let src = g.row(r);
                            let dst = ga.row_mut(r);
                            for (j, &p) in perm.iter().enumerate() {
                                dst[p] = dst[p] + src[j];
                            }
                        }
                        acc(*a, ga);
                    }
                }
                Op::SumCols(a) => {
                    if needs(*a) {
                        let (rows, cols) = val(*a).shape();
                        let mut ga = Tensor2D::zeros(rows, cols);
                        for r in 0..rows {
                            let gr = g.get(r, 0);
                            ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                        }
                        acc(*a, ga);
                    }
                }
                Op::MeanRows(a) => {
                    if needs(*a) {
                        let (rows, cols) = val(*a).shape();
                        let inv = T::one() / T::from_usize(rows).unwrap_or_else(T::one);
                        let mut ga = Tensor2D::zeros(rows, cols);
                        for r in 0..rows {
                            for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                                *o = v * inv;
                            }
                        }
                        acc(*a, ga);
                    }
                }
                Op::BroadcastRows(a) => {
                    if needs(*a) {
                        acc(*a, g.sum_rows());
                    }
                }
                Op::Sum(a) => {
                    if needs(*a) {
                        let (rows, cols) = val(*a).shape();
                        acc(*a, Tensor2D::filled(rows, cols, g.data()[0]));
                    }
                }
                Op::Mean(a) => {
                    if needs(*a) {
                        let (rows, cols) = val(*a).shape();
                        let n = T::from_usize(rows * cols).unwrap_or_else(T::one);
                        acc(*a, Tensor2D::filled(rows, cols, g.data()[0] / n));
                    }
                }
            }
        }
        Ok(out)
    }
}
