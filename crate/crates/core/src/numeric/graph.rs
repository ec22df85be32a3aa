//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Each recorded node
//! keeps its forward value and enough information to push an output gradient
//! back to its inputs, so [`Graph::backward`] is a single reverse sweep over the
//! tape. Inputs always precede their consumers, which makes the record acyclic
//! by construction.
//!
//! Values flowing through the tape are treated as matrices: a node of shape
//! `[n, m, ...]` is viewed as `n` rows of `len / n` columns by the row-wise
//! primitives (`add_row`, `sum_rows`, `log_softmax`, ...).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::Array;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Expand(usize),
    LogSoftmax(usize),
    Gather(usize, Rc<[u32]>),
    Reshape(usize),
}

/// Gather sentinel: the output element is zero and receives no gradient.
pub const GATHER_ZERO: u32 = u32::MAX;

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Expand(..) => "expand",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    first_bad: Cell<Option<usize>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of `len` when the node received none.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.len()],
        }
    }

    /// Adds the gradient of `var` into the accumulator of `target`.
    pub fn accumulate_into(&self, var: Var<'_>, target: &mut Array) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn rows_cols(shape: &[usize], len: usize) -> (usize, usize) {
    match shape.len() {
        0 | 1 => (1, len),
        _ => (shape[0], len / shape[0].max(1)),
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass slices of exactly m*k, k*n and m*n elements and
    // strides describing row- or column-major views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense product of row-major `a` (`m x k`) and `b` (`k x n`).
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_bad.get().is_none() && !value.iter().all(|v| v.is_finite()) {
            self.first_bad.set(Some(id));
        }
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Leaf holding a copy of `array`; it requires a gradient iff the array does.
    pub fn leaf(&self, array: &Array) -> Var<'_> {
        self.push(
            array.shape().to_vec(),
            array.data().to_vec(),
            Op::Leaf,
            array.requires_grad(),
        )
    }

    /// Leaf that participates in differentiation regardless of the array's flag.
    pub fn input(&self, array: &Array) -> Var<'_> {
        self.push(array.shape().to_vec(), array.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, array: &Array) -> Var<'_> {
        self.push(array.shape().to_vec(), array.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Var<'_> {
        self.push(shape.into(), data, Op::Leaf, false)
    }

    /// First node (with its op name) whose forward value was non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_bad.get() {
            None => Ok(()),
            Some(node) => Err(Error::Numeric {
                node,
                op: self.nodes.borrow()[node].op.name(),
            }),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every node that requires one. Nothing outside the
    /// returned map is touched, so a failure leaves parameter buffers intact.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape("backward", &[], &nodes[loss.id].shape));
        }
        self.check_finite()?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            if !gy.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    node: id,
                    op: node.op.name(),
                });
            }
            backprop(&nodes, id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> &'a mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()])
}

fn backprop(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(&nodes[a].shape, nodes[a].value.len());
            let n = nodes[b].value.len() / k.max(1);
            if needs(nodes, a) {
                // dA += dY · Bᵀ
                let bv = &nodes[b].value;
                let ga = acc(grads, nodes, a);
                gemm(m, n, k, gy, (n as isize, 1), bv, (1, n as isize), 1.0, ga);
            }
            if needs(nodes, b) {
                // dB += Aᵀ · dY
                let av = &nodes[a].value;
                let gb = acc(grads, nodes, b);
                gemm(k, m, n, av, (1, k as isize), gy, (n as isize, 1), 1.0, gb);
            }
        }
        Op::Transpose(a) => {
            if needs(nodes, a) {
                let (r, c) = rows_cols(&nodes[a].shape, nodes[a].value.len());
                let ga = acc(grads, nodes, a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gy[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for src in [a, b] {
                if needs(nodes, src) {
                    acc(grads, nodes, src).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(nodes, a) {
                acc(grads, nodes, a).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if needs(nodes, b) {
                acc(grads, nodes, b).iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            if needs(nodes, a) {
                let bv = &nodes[b].value;
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    ga[i] += gy[i] * bv[i];
                }
            }
            if needs(nodes, b) {
                let av = &nodes[a].value;
                let gb = acc(grads, nodes, b);
                for i in 0..gy.len() {
                    gb[i] += gy[i] * av[i];
                }
            }
        }
        Op::AddRow(x, r) => {
            if needs(nodes, x) {
                acc(grads, nodes, x).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if needs(nodes, r) {
                let m = nodes[r].value.len();
                let gr = acc(grads, nodes, r);
                for row in gy.chunks(m) {
                    gr.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::MulRow(x, r) => {
            let m = nodes[r].value.len();
            if needs(nodes, x) {
                let rv = &nodes[r].value;
                let gx = acc(grads, nodes, x);
                for (gxr, gyr) in gx.chunks_mut(m).zip(gy.chunks(m)) {
                    for j in 0..m {
                        gxr[j] += gyr[j] * rv[j];
                    }
                }
            }
            if needs(nodes, r) {
                let xv = &nodes[x].value;
                let gr = acc(grads, nodes, r);
                for (xr, gyr) in xv.chunks(m).zip(gy.chunks(m)) {
                    for j in 0..m {
                        gr[j] += gyr[j] * xr[j];
                    }
                }
            }
        }
        Op::Scale(a, k) => {
            if needs(nodes, a) {
                acc(grads, nodes, a).iter_mut().zip(gy).for_each(|(g, d)| *g += k * d);
            }
        }
        Op::Offset(a) => {
            if needs(nodes, a) {
                acc(grads, nodes, a).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Exp(a) => {
            if needs(nodes, a) {
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    ga[i] += gy[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            if needs(nodes, a) {
                let av = &nodes[a].value;
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    ga[i] += gy[i] / av[i];
                }
            }
        }
        Op::Tanh(a) => {
            if needs(nodes, a) {
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    ga[i] += gy[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Relu(a) => {
            if needs(nodes, a) {
                let av = &nodes[a].value;
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    if av[i] > 0.0 {
                        ga[i] += gy[i];
                    }
                }
            }
        }
        Op::Sqrt(a) => {
            if needs(nodes, a) {
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    ga[i] += gy[i] * 0.5 / y[i];
                }
            }
        }
        Op::Square(a) => {
            if needs(nodes, a) {
                let av = &nodes[a].value;
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    ga[i] += gy[i] * 2.0 * av[i];
                }
            }
        }
        Op::ClampMin(a, floor) => {
            if needs(nodes, a) {
                let av = &nodes[a].value;
                let ga = acc(grads, nodes, a);
                for i in 0..gy.len() {
                    if av[i] > floor {
                        ga[i] += gy[i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if needs(nodes, a) {
                let d = gy[0];
                acc(grads, nodes, a).iter_mut().for_each(|g| *g += d);
            }
        }
        Op::SumRows(a) => {
            if needs(nodes, a) {
                let (_, c) = rows_cols(&nodes[a].shape, nodes[a].value.len());
                let ga = acc(grads, nodes, a);
                for (row, d) in ga.chunks_mut(c).zip(gy) {
                    row.iter_mut().for_each(|g| *g += d);
                }
            }
        }
        Op::SumCols(a) => {
            if needs(nodes, a) {
                let c = gy.len();
                let ga = acc(grads, nodes, a);
                for row in ga.chunks_mut(c) {
                    row.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Expand(a) => {
            if needs(nodes, a) {
                let s: f64 = gy.iter().sum();
                acc(grads, nodes, a)[0] += s;
            }
        }
        Op::LogSoftmax(a) => {
            if needs(nodes, a) {
                let (_, c) = rows_cols(&nodes[a].shape, nodes[a].value.len());
                let ga = acc(grads, nodes, a);
                for ((gar, gyr), yr) in ga.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                    let total: f64 = gyr.iter().sum();
                    for j in 0..c {
                        gar[j] += gyr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::Gather(a, ref index) => {
            if needs(nodes, a) {
                let ga = acc(grads, nodes, a);
                for (o, &src) in index.iter().enumerate() {
                    if src != GATHER_ZERO {
                        ga[src as usize] += gy[o];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if needs(nodes, a) {
                acc(grads, nodes, a).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_array(&self) -> Array {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Array::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value[0]
    }

    fn same_graph(&self, other: Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.graph.push(shape, value, op, rg)
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        self.same_graph(other);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            assert_eq!(
                a.value.len(),
                b.value.len(),
                "{}: shapes {:?} vs {:?}",
                op.name(),
                a.shape,
                b.shape
            );
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        self.graph.push(shape, value, op, rg)
    }

    /// Matrix product; `self` is `[m, k]`, `other` is `[k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(other);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let (m, k) = rows_cols(&a.shape, a.value.len());
            assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-d, got {:?}", b.shape);
            assert_eq!(b.shape[0], k, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
            let n = b.shape[1];
            (
                vec![m, n],
                matmul_raw(&a.value, &b.value, m, k, n),
                a.requires_grad || b.requires_grad,
            )
        };
        self.graph.push(shape, value, Op::MatMul(self.id, other.id), rg)
    }

    pub fn t(self) -> Var<'g> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = rows_cols(&a.shape, a.value.len());
            let mut v = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    v[j * r + i] = a.value[i * c + j];
                }
            }
            (vec![c, r], v, a.requires_grad)
        };
        self.graph.push(shape, value, Op::Transpose(self.id), rg)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let id = (self.id, other.id);
        self.binary(other, Op::Add(id.0, id.1), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let id = (self.id, other.id);
        self.binary(other, Op::Sub(id.0, id.1), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let id = (self.id, other.id);
        self.binary(other, Op::Mul(id.0, id.1), |a, b| a * b)
    }

    fn row_op(self, row: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        self.same_graph(row);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let r = &nodes[row.id];
            let m = r.value.len();
            assert!(
                m > 0 && x.value.len() % m == 0 && rows_cols(&x.shape, x.value.len()).1 == m,
                "{}: {:?} does not broadcast over {:?}",
                op.name(),
                r.shape,
                x.shape
            );
            let mut v = x.value.clone();
            for chunk in v.chunks_mut(m) {
                for (a, b) in chunk.iter_mut().zip(&r.value) {
                    *a = f(*a, *b);
                }
            }
            (x.shape.clone(), v, x.requires_grad || r.requires_grad)
        };
        self.graph.push(shape, value, op, rg)
    }

    /// Adds a row vector to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let op = Op::AddRow(self.id, row.id);
        self.row_op(row, op, |a, b| a + b)
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let op = Op::MulRow(self.id, row.id);
        self.row_op(row, op, |a, b| a * b)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, k), |v| k * v)
    }

    pub fn offset(self, k: f64) -> Var<'g> {
        self.unary(Op::Offset(self.id), |v| v + k)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// Rectifier; its derivative at exactly zero is taken as zero.
    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    /// `max(x, floor)`; clamped entries pass no gradient.
    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        self.unary(Op::ClampMin(self.id, floor), move |v| v.max(floor))
    }

    pub fn sum(self) -> Var<'g> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (vec![a.value.iter().sum()], a.requires_grad)
        };
        self.graph.push(Vec::new(), value, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-row sums: `[n, m] -> [n]`.
    pub fn sum_rows(self) -> Var<'g> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = rows_cols(&a.shape, a.value.len());
            let v: Vec<f64> = a.value.chunks(c.max(1)).map(|row| row.iter().sum()).collect();
            debug_assert_eq!(v.len(), r);
            (vec![r], v, a.requires_grad)
        };
        self.graph.push(shape, value, Op::SumRows(self.id), rg)
    }

    /// Per-column sums: `[n, m] -> [m]`.
    pub fn sum_cols(self) -> Var<'g> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (_, c) = rows_cols(&a.shape, a.value.len());
            let mut v = vec![0.0; c];
            for row in a.value.chunks(c) {
                v.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            (vec![c], v, a.requires_grad)
        };
        self.graph.push(shape, value, Op::SumCols(self.id), rg)
    }

    /// Column means: `[n, m] -> [m]`.
    pub fn mean_cols(self) -> Var<'g> {
        let n = self.shape().first().copied().unwrap_or(1) as f64;
        self.sum_cols().scale(1.0 / n)
    }

    /// Broadcasts a single-element node to `[len]`.
    pub fn expand(self, len: usize) -> Var<'g> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(a.value.len(), 1, "expand needs a single element");
            (vec![a.value[0]; len], a.requires_grad)
        };
        self.graph.push(vec![len], value, Op::Expand(self.id), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'g> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let (_, c) = rows_cols(&a.shape, a.value.len());
            let mut v = a.value.clone();
            for row in v.chunks_mut(c) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            (a.shape.clone(), v, a.requires_grad)
        };
        self.graph.push(shape, value, Op::LogSoftmax(self.id), rg)
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(self, index: Rc<[u32]>, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape");
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let v = index
                .iter()
                .map(|&i| if i == GATHER_ZERO { 0.0 } else { a.value[i as usize] })
                .collect();
            (v, a.requires_grad)
        };
        self.graph.push(shape, value, Op::Gather(self.id, index), rg)
    }

    /// Picks rows of a 2-d node: `[n, m] -> [rows.len(), m]`.
    pub fn select_rows(self, rows: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let m = rows_cols(&shape, self.len()).1;
        let index: Vec<u32> = rows
            .iter()
            .flat_map(|&r| (0..m).map(move |j| (r * m + j) as u32))
            .collect();
        self.gather(index.into(), vec![rows.len(), m])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let shape = shape.into();
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(shape.iter().product::<usize>(), a.value.len(), "reshape size");
            (a.value.clone(), a.requires_grad)
        };
        self.graph.push(shape, value, Op::Reshape(self.id), rg)
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(self, rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(self, rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(self, rhs)
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        Var::neg(self)
    }
}
