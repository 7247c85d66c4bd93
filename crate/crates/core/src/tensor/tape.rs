use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

use super::kernels::{gemm, gemm_nt, gemm_tn, split_axis};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    /// Position of the producing node in execution order.
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp<T> {
    Neg,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Sigmoid,
    Recip,
    Scale(T),
    Offset(T),
    Clamp(T, T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { trainable: bool },
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp<T>, usize),
    Reduce {
        op: Reduction,
        src: usize,
        axis: Option<usize>,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        src: usize,
        axis: usize,
        from: usize,
        to: usize,
    },
    Transpose(usize),
    Reshape(usize),
    ExpandCols(usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, s)
            | Op::Reduce { src: s, .. }
            | Op::Narrow { src: s, .. }
            | Op::Transpose(s)
            | Op::Reshape(s)
            | Op::ExpandCols(s) => vec![*s],
            Op::Concat { srcs, .. } => srcs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Execution-order record of tensor operations for reverse-mode
/// differentiation.
///
/// Operations take `&self`, so expressions can nest freely. A tape is
/// single-threaded; build one per batch shard.
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
    strict_finite: bool,
    backward_done: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            strict_finite: false,
            backward_done: Cell::new(false),
        }
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn strict() -> Self {
        Self {
            strict_finite: true,
            ..Self::new()
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var, TensorError> {
        if self.strict_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    /// Records a non-trainable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf { trainable: false }, value, "constant")
            .unwrap_or_else(|_| panic!("non-finite constant on strict tape"))
    }

    /// Records a named trainable leaf.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Result<Var, TensorError> {
        if self.params.borrow().contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let v = self.push(Op::Leaf { trainable: true }, value, "param")?;
        self.params.borrow_mut().insert(name.to_string(), v.idx);
        Ok(v)
    }

    /// Looks up a trainable leaf by name.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.borrow().get(name).map(|&idx| Var { tape: self.id, idx })
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.idx].value.item()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.idx].value)
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes.borrow()[v.idx]
            .op
            .parents()
            .into_iter()
            .map(|idx| Var { tape: self.id, idx })
            .collect()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(
            self.nodes.borrow()[v.idx].op,
            Op::Leaf { trainable: true }
        )
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                });
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            Tensor::new(vec![m, n], gemm(ta.data(), tb.data(), m, k, n))?
        };
        self.push(Op::MatMul(ia, ib), value, "matmul")
    }

    fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let shape =
                broadcast_shape(ta, tb).ok_or_else(|| TensorError::ShapeMismatch {
                    op: name,
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })?;
            let n: usize = shape.iter().product();
            let (da, db) = (ta.data(), tb.data());
            let (la, lb) = (da.len(), db.len());
            let data: Vec<T> = if la == n && lb == n {
                da.iter()
                    .zip(db)
                    .map(|(&x, &y)| apply_binary(op, x, y))
                    .collect()
            } else {
                (0..n)
                    .map(|i| apply_binary(op, da[i % la], db[i % lb]))
                    .collect()
            };
            Tensor::new(shape, data)?
        };
        self.push(Op::Binary(op, ia, ib), value, name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&self, op: UnaryOp<T>, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = self.nodes.borrow()[ia].value.map(|x| apply_unary(op, x));
        self.push(Op::Unary(op, ia), value, unary_name(op))
    }

    pub fn neg(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn recip(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Recip, a)
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn offset(&self, a: Var, c: T) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Offset(c), a)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Clamp(lo, hi), a)
    }

    fn reduce(&self, op: Reduction, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            match axis {
                None => {
                    let s: T = t.data().iter().copied().sum();
                    let v = match op {
                        Reduction::Sum => s,
                        Reduction::Mean => s / T::lit(t.len() as f64),
                    };
                    Tensor::scalar(v)
                }
                Some(ax) => {
                    if ax >= t.rank() {
                        return Err(TensorError::AxisOutOfRange {
                            axis: ax,
                            rank: t.rank(),
                        });
                    }
                    let (outer, n, inner) = split_axis(t.shape(), ax);
                    let d = t.data();
                    let mut out = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            let orow = &mut out[o * inner..(o + 1) * inner];
                            for (x, &y) in orow.iter_mut().zip(&d[base..base + inner]) {
                                *x += y;
                            }
                        }
                    }
                    if op == Reduction::Mean {
                        let c = T::lit(n as f64);
                        out.iter_mut().for_each(|x| *x = *x / c);
                    }
                    let mut shape: Vec<usize> = t.shape().to_vec();
                    shape.remove(ax);
                    if shape.is_empty() {
                        shape.push(1);
                    }
                    Tensor::new(shape, out)?
                }
            }
        };
        let name = match op {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        self.push(Op::Reduce { op, src: ia, axis }, value, name)
    }

    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(Reduction::Sum, a, axis)
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(Reduction::Mean, a, axis)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::EmptyConcat);
        };
        let value = {
            let nodes = self.nodes.borrow();
            let base = nodes[first].value.shape().to_vec();
            if axis >= base.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: base.len(),
                });
            }
            let mut total = 0;
            for &i in &idx {
                let s = nodes[i].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: base.clone(),
                        right: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &idx {
                    let t = &nodes[i].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, out)?
        };
        self.push(Op::Concat { srcs: idx, axis }, value, "concat")
    }

    /// Copies the index range `[from, to)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, from: usize, to: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if axis >= t.rank() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: t.rank(),
                });
            }
            let (outer, n, inner) = split_axis(t.shape(), axis);
            if from >= to || to > n {
                return Err(TensorError::RangeOutOfBounds { from, to, len: n });
            }
            let mut out = Vec::with_capacity(outer * (to - from) * inner);
            for o in 0..outer {
                let base = o * n * inner;
                out.extend_from_slice(&t.data()[base + from * inner..base + to * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = to - from;
            Tensor::new(shape, out)?
        };
        self.push(
            Op::Narrow {
                src: ia,
                axis,
                from,
                to,
            },
            value,
            "narrow",
        )
    }

    /// Rows `[from, to)` of the leading axis.
    pub fn slice_rows(&self, a: Var, from: usize, to: usize) -> Result<Var, TensorError> {
        self.narrow(a, 0, from, to)
    }

    /// Columns `[from, to)` of a matrix.
    pub fn slice_cols(&self, a: Var, from: usize, to: usize) -> Result<Var, TensorError> {
        self.narrow(a, 1, from, to)
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            if t.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let d = t.data();
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        self.push(Op::Transpose(ia), value, "transpose")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            t.reshape(shape.to_vec()).map_err(|_| TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            })?
        };
        self.push(Op::Reshape(ia), value, "reshape")
    }

    /// Repeats a length-`m` vector across `n` columns, giving `m×n`.
    pub fn expand_cols(&self, a: Var, n: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[ia].value;
            let ok = t.rank() == 1 || (t.rank() == 2 && t.shape()[1] == 1);
            if !ok || n == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "expand_cols",
                    left: t.shape().to_vec(),
                    right: vec![n],
                });
            }
            let m = t.shape()[0];
            let mut out = Vec::with_capacity(m * n);
            for &x in t.data() {
                out.extend(std::iter::repeat(x).take(n));
            }
            Tensor::new(vec![m, n], out)?
        };
        self.push(Op::ExpandCols(ia), value, "expand_cols")
    }

    // ---- reverse pass -----------------------------------------------------

    /// Clears the one-shot guard so `backward` may run again on this tape.
    pub fn reset_backward(&self) {
        self.backward_done.set(false);
    }

    /// Propagates `∂loss/∂node` to every ancestor of `loss`.
    ///
    /// A second call without [`Tape::reset_backward`] is an error.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let li = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[li].value.shape().to_vec(),
            });
        }
        if self.backward_done.replace(true) {
            return Err(TensorError::BackwardTwice);
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; li + 1];
        grads[li] = Some(vec![T::one()]);
        let mut visited = 0usize;
        for idx in (0..=li).rev() {
            visited += 1;
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            propagate(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = nodes[..=li]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
            params,
            visited,
        })
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let ga = gemm_nt(g, tb.data(), m, n, k);
            add_into(acc(&mut grads[*a], m * k), &ga);
            let gb = gemm_tn(ta.data(), g, m, k, n);
            add_into(acc(&mut grads[*b], k * n), &gb);
        }
        Op::Binary(op, a, b) => {
            let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (la, lb) = (da.len(), db.len());
            {
                let ga = acc(&mut grads[*a], la);
                for (i, &gi) in g.iter().enumerate() {
                    let y = db[i % lb];
                    ga[i % la] += gi
                        * match op {
                            BinaryOp::Add | BinaryOp::Sub => T::one(),
                            BinaryOp::Mul => y,
                            BinaryOp::Div => T::one() / y,
                        };
                }
            }
            let gb = acc(&mut grads[*b], lb);
            for (i, &gi) in g.iter().enumerate() {
                let (x, y) = (da[i % la], db[i % lb]);
                gb[i % lb] += gi
                    * match op {
                        BinaryOp::Add => T::one(),
                        BinaryOp::Sub => -T::one(),
                        BinaryOp::Mul => x,
                        BinaryOp::Div => -x / (y * y),
                    };
            }
        }
        Op::Unary(op, a) => {
            let x = nodes[*a].value.data();
            let y = node.value.data();
            let ga = acc(&mut grads[*a], x.len());
            for i in 0..x.len() {
                ga[i] += g[i] * unary_derivative(*op, x[i], y[i]);
            }
        }
        Op::Reduce { op, src, axis } => {
            let t = &nodes[*src].value;
            let ga = acc(&mut grads[*src], t.len());
            match axis {
                None => {
                    let s = match op {
                        Reduction::Sum => g[0],
                        Reduction::Mean => g[0] / T::lit(t.len() as f64),
                    };
                    ga.iter_mut().for_each(|x| *x += s);
                }
                Some(ax) => {
                    let (outer, n, inner) = split_axis(t.shape(), *ax);
                    let c = match op {
                        Reduction::Sum => T::one(),
                        Reduction::Mean => T::one() / T::lit(n as f64),
                    };
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for (x, &gv) in ga[base..base + inner].iter_mut().zip(grow) {
                                *x += gv * c;
                            }
                        }
                    }
                }
            }
        }
        Op::Concat { srcs, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for o in 0..outer {
                for &s in srcs {
                    let t = &nodes[s].value;
                    let chunk = t.shape()[*axis] * inner;
                    let gs = acc(&mut grads[s], t.len());
                    add_into(&mut gs[o * chunk..(o + 1) * chunk], &g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
        }
        Op::Narrow {
            src,
            axis,
            from,
            to,
        } => {
            let t = &nodes[*src].value;
            let (outer, n, inner) = split_axis(t.shape(), *axis);
            let width = (to - from) * inner;
            let gs = acc(&mut grads[*src], t.len());
            for o in 0..outer {
                let base = o * n * inner + from * inner;
                add_into(&mut gs[base..base + width], &g[o * width..(o + 1) * width]);
            }
        }
        Op::Transpose(src) => {
            let t = &nodes[*src].value;
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let gs = acc(&mut grads[*src], t.len());
            for i in 0..r {
                for j in 0..c {
                    gs[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Reshape(src) => {
            let gs = acc(&mut grads[*src], g.len());
            add_into(gs, g);
        }
        Op::ExpandCols(src) => {
            let m = nodes[*src].value.len();
            let n = g.len() / m;
            let gs = acc(&mut grads[*src], m);
            for i in 0..m {
                gs[i] += g[i * n..(i + 1) * n].iter().copied().sum::<T>();
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn broadcast_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Option<Vec<usize>> {
    if a.shape() == b.shape() {
        return Some(a.shape().to_vec());
    }
    // `other` broadcasts onto `full` if it is a scalar or a row vector whose
    // length equals the trailing dimension of `full`.
    let fits = |full: &Tensor<T>, other: &Tensor<T>| {
        other.len() == 1 || (other.len() == full.last_dim() && other.last_dim() == full.last_dim())
    };
    if b.len() <= a.len() && fits(a, b) {
        Some(a.shape().to_vec())
    } else if a.len() < b.len() && fits(b, a) {
        Some(b.shape().to_vec())
    } else {
        None
    }
}

#[inline]
fn apply_binary<T: Scalar>(op: BinaryOp, x: T, y: T) -> T {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn apply_unary<T: Scalar>(op: UnaryOp<T>, x: T) -> T {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Square => x * x,
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Recip => T::one() / x,
        UnaryOp::Scale(c) => x * c,
        UnaryOp::Offset(c) => x + c,
        UnaryOp::Clamp(lo, hi) => x.max(lo).min(hi),
    }
}

#[inline]
fn unary_derivative<T: Scalar>(op: UnaryOp<T>, x: T, y: T) -> T {
    match op {
        UnaryOp::Neg => -T::one(),
        UnaryOp::Tanh => T::one() - y * y,
        UnaryOp::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::Exp => y,
        UnaryOp::Log => T::one() / x,
        UnaryOp::Square => x + x,
        UnaryOp::Sqrt => T::lit(0.5) / y,
        UnaryOp::Sigmoid => y * (T::one() - y),
        UnaryOp::Recip => -y * y,
        UnaryOp::Scale(c) => c,
        UnaryOp::Offset(_) => T::one(),
        UnaryOp::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

fn unary_name<T>(op: UnaryOp<T>) -> &'static str {
    match op {
        UnaryOp::Neg => "neg",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Relu => "relu",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Square => "square",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Recip => "recip",
        UnaryOp::Scale(_) => "scale",
        UnaryOp::Offset(_) => "offset",
        UnaryOp::Clamp(..) => "clamp",
    }
}

/// Result of [`Tape::backward`]: gradients for every node up to the loss.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<String, usize>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Number of nodes the reverse sweep passed through.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Gradient with respect to `v`; zeros if `v` does not influence the
    /// loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        let shape = match self.shapes.get(v.idx) {
            Some(s) => s.clone(),
            None => panic!("variable recorded after the loss"),
        };
        match &self.grads[v.idx] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn by_name(&self, name: &str) -> Option<Tensor<T>> {
        let &idx = self.params.get(name)?;
        if idx >= self.shapes.len() {
            return None;
        }
        Some(self.wrt(Var {
            tape: self.tape,
            idx,
        }))
    }

    /// Gradients of every trainable leaf, keyed by name.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .keys()
            .filter_map(|k| self.by_name(k).map(|g| (k.clone(), g)))
            .collect()
    }
}
