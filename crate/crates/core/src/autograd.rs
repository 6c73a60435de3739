//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]. Nodes are
//! appended strictly after their inputs, so the tape order is a topological
//! order and [`Tape::backward`] replays it once, in reverse.
//!
//! A tape supports exactly one backward pass. Build a fresh tape per
//! forward/backward pair.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, exact via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    LogClamp(usize, f64),
    Sqrt(usize),
    Recip(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    MaskedSoftmax {
        scores: usize,
        mask: usize,
        /// exp(s - rowmax) / Z for every entry, masked or not.
        unmasked: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(usize),
    MeanAxis0(usize),
    MeanAxis1(usize),
    Gather {
        src: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Index(usize, Vec<usize>),
    Scatter(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    RepeatRows(usize),
    StraightThrough(usize),
}

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
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::LogClamp(..) => "log_clamp",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll(..) => "sum",
            Op::MeanAxis0(..) => "mean_rows",
            Op::MeanAxis1(..) => "mean_cols",
            Op::Gather { .. } => "gather",
            Op::Index(..) => "index",
            Op::Scatter(..) => "scatter",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::RepeatRows(..) => "repeat_rows",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    differentiated: Cell<bool>,
    non_finite: Cell<Option<&'static str>>,
    warnings: RefCell<Vec<String>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("differentiated", &self.differentiated.get())
            .finish()
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Messages from operations that completed without effect, such as a
    /// backward call on a loss that does not depend on any parameter.
    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    /// Fails if any recorded operation produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }

    /// Gradient of the last backward loss with respect to `var`, if any
    /// flowed into it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(var.value().shape().to_vec(), g.clone()))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.non_finite.get().is_none() && !value.all_finite() {
            self.non_finite.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Allowed once per tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        if self.differentiated.get() {
            return contract("backward was already run on this tape");
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        if let Some(op) = self.non_finite.get() {
            return Err(Error::NonFinite(op));
        }
        self.differentiated.set(true);
        if !root.requires_grad {
            self.warnings
                .borrow_mut()
                .push("backward called on a tensor detached from every parameter".into());
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(val(*a));
            let n = val(*b).cols();
            if let Some(ga) = slot(grads, nodes, *a) {
                gemm(m, n, k, g, false, val(*b).data(), true, ga, true);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gemm(k, m, n, val(*a).data(), true, g, false, gb, true);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(val(*a));
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(gx) = slot(grads, nodes, id) {
                    gx.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, d), y) in ga.iter_mut().zip(g).zip(bv) {
                    *x += d * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, d), y) in gb.iter_mut().zip(g).zip(av) {
                    *x += d * y;
                }
            }
        }
        Op::AddRow(x, v) => {
            let n = val(*x).cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
            if let Some(gv) = slot(grads, nodes, *v) {
                for row in g.chunks(n) {
                    gv.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                }
            }
        }
        Op::AddCol(x, v) => {
            let n = val(*x).cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
            if let Some(gv) = slot(grads, nodes, *v) {
                for (i, row) in g.chunks(n).enumerate() {
                    gv[i] += row.iter().sum::<f64>();
                }
            }
        }
        Op::MulCol(x, v) => {
            let n = val(*x).cols();
            let (xv, vv) = (val(*x).data(), val(*v).data());
            if let Some(gx) = slot(grads, nodes, *x) {
                for (i, (grow, drow)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    grow.iter_mut().zip(drow).for_each(|(a, d)| *a += d * vv[i]);
                }
            }
            if let Some(gv) = slot(grads, nodes, *v) {
                for (i, (xrow, drow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    gv[i] += xrow.iter().zip(drow).map(|(a, d)| a * d).sum::<f64>();
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, d)| *a += c * d);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, d), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *a += d * y;
                }
            }
        }
        Op::LogClamp(x, eps) => {
            let xv = val(*x).data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, d), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > *eps {
                        *a += d / v;
                    }
                }
            }
        }
        Op::Sqrt(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, d), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    if y > 0.0 {
                        *a += d * 0.5 / y;
                    }
                }
            }
        }
        Op::Recip(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, d), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *a -= d * y * y;
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, d), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *a += d * (normal_cdf(v) + v * normal_pdf(v));
                }
            }
        }
        Op::Softmax(x) => {
            let n = out.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((grow, drow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for ((a, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                        *a += y * (d - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let n = out.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((grow, drow), lrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let total: f64 = drow.iter().sum();
                    for ((a, d), l) in grow.iter_mut().zip(drow).zip(lrow) {
                        *a += d - l.exp() * total;
                    }
                }
            }
        }
        Op::MaskedSoftmax { scores, mask, unmasked } => {
            let n = out.cols();
            let rows: Vec<f64> = g
                .chunks(n)
                .zip(out.data().chunks(n))
                .map(|(d, y)| d.iter().zip(y).map(|(a, b)| a * b).sum())
                .collect();
            if let Some(gs) = slot(grads, nodes, *scores) {
                for (i, (grow, (drow, yrow))) in gs.chunks_mut(n).zip(g.chunks(n).zip(out.data().chunks(n))).enumerate()
                {
                    for ((a, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                        *a += y * (d - rows[i]);
                    }
                }
            }
            if let Some(gm) = slot(grads, nodes, *mask) {
                for (i, (drow, erow)) in g.chunks(n).zip(unmasked.chunks(n)).enumerate() {
                    for ((a, d), e) in gm.iter_mut().zip(drow).zip(erow) {
                        *a += e * (d - rows[i]);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let gv = val(*gain).data();
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; n];
                for (r, (grow, drow)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxhat[j] = drow[j] * gv[j];
                    }
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let scale = inv_std[r] / n as f64;
                    for j in 0..n {
                        grow[j] += scale * (n as f64 * dxhat[j] - sum - xh[j] * dot);
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, *gain) {
                for (drow, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += drow[j] * xh[j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for drow in g.chunks(n) {
                    gb.iter_mut().zip(drow).for_each(|(a, d)| *a += d);
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::MeanAxis0(x) => {
            let (m, n) = dims2(val(*x));
            if let Some(gx) = slot(grads, nodes, *x) {
                for row in gx.chunks_mut(n) {
                    row.iter_mut().zip(g).for_each(|(a, d)| *a += d / m as f64);
                }
            }
        }
        Op::MeanAxis1(x) => {
            let n = val(*x).cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (i, row) in gx.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|a| *a += g[i] / n as f64);
                }
            }
        }
        Op::Gather { src, rows, cols } => {
            let n = val(*src).cols();
            if let Some(gs) = slot(grads, nodes, *src) {
                let w = cols.len();
                for (a, &r) in rows.iter().enumerate() {
                    for (b, &c) in cols.iter().enumerate() {
                        gs[r * n + c] += g[a * w + b];
                    }
                }
            }
        }
        Op::Index(src, idx) => {
            if let Some(gs) = slot(grads, nodes, *src) {
                for (a, &i) in idx.iter().enumerate() {
                    gs[i] += g[a];
                }
            }
        }
        Op::Scatter(src, idx) => {
            if let Some(gs) = slot(grads, nodes, *src) {
                for (a, &i) in idx.iter().enumerate() {
                    gs[a] += g[i];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(gp) = slot(grads, nodes, p) {
                    for (grow, drow) in gp.chunks_mut(w).zip(g.chunks(total)) {
                        grow.iter_mut()
                            .zip(&drow[offset..offset + w])
                            .for_each(|(a, d)| *a += d);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, d)| *a += d);
                }
                offset += len;
            }
        }
        Op::RepeatRows(v) => {
            let n = out.cols();
            if let Some(gv) = slot(grads, nodes, *v) {
                for row in g.chunks(n) {
                    gv.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                }
            }
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Convenience for `tape.grad(self)`.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// A constant copy that blocks gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = crate::tensor::matmul_values(&self.value(), &other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if !a.is_matrix() {
            return contract(format!("transpose needs a matrix, got {:?}", a.shape()));
        }
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data()[i * n + j];
            }
        }
        Ok(self.unary(Tensor::from_parts(vec![n, m], out), Op::Transpose(self.id)))
    }

    fn zip_with(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Mul(self.id, self.id))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&self, v: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), v.value());
        let n = a.cols();
        if b.shape() != [n] {
            return Err(dim_err("add_row", &a, &b));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary(v, out, Op::AddRow(self.id, v.id)))
    }

    /// Adds `v[i]` to every entry of row `i`.
    pub fn add_col(&self, v: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), v.value());
        let n = a.cols();
        if b.shape() != [a.rows()] {
            return Err(dim_err("add_col", &a, &b));
        }
        let mut data = a.data().to_vec();
        for (row, y) in data.chunks_mut(n).zip(b.data()) {
            row.iter_mut().for_each(|x| *x += y);
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary(v, out, Op::AddCol(self.id, v.id)))
    }

    /// Multiplies row `i` by `v[i]`.
    pub fn mul_col(&self, v: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), v.value());
        let n = a.cols();
        if b.shape() != [a.rows()] {
            return Err(dim_err("mul_col", &a, &b));
        }
        let mut data = a.data().to_vec();
        for (row, y) in data.chunks_mut(n).zip(b.data()) {
            row.iter_mut().for_each(|x| *x *= y);
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary(v, out, Op::MulCol(self.id, v.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&self, eps: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(eps).ln());
        self.unary(v, Op::LogClamp(self.id, eps))
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0).sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn recip(&self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / x);
        self.unary(v, Op::Recip(self.id))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(|x| x * normal_cdf(x));
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn softmax(&self) -> Var<'t> {
        let a = self.value();
        let n = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.unary(Tensor::from_parts(a.shape().to_vec(), data), Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var<'t> {
        let a = self.value();
        let n = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.unary(Tensor::from_parts(a.shape().to_vec(), data), Op::LogSoftmax(self.id))
    }

    /// Row softmax restricted to the columns where `mask` is nonzero.
    ///
    /// With a 0/1 mask the forward values equal an additive −∞ mask on the
    /// dropped columns: those columns come out exactly zero and every row
    /// sums to one over the kept ones. Fractional masks weight the columns,
    /// and gradients flow to the mask in either case.
    pub fn masked_softmax(&self, mask: &Var<'t>) -> Result<Var<'t>> {
        let (s, m) = (self.value(), mask.value());
        let n = s.cols();
        if m.shape() != [n] {
            return Err(dim_err("masked_softmax", &s, &m));
        }
        let mv = m.data();
        if mv.iter().any(|&x| x < 0.0) {
            return contract("attention mask entries must be nonnegative");
        }
        if mv[0] <= 0.0 {
            return contract("attention mask must keep the class token");
        }
        let mut out = vec![0.0; s.numel()];
        let mut unmasked = vec![0.0; s.numel()];
        for ((srow, orow), urow) in s.data().chunks(n).zip(out.chunks_mut(n)).zip(unmasked.chunks_mut(n)) {
            let max = srow
                .iter()
                .zip(mv)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ((o, &x), &w) in orow.iter_mut().zip(srow).zip(mv) {
                if w > 0.0 {
                    *o = (x - max).exp() * w;
                    z += *o;
                }
            }
            for ((o, u), &x) in orow.iter_mut().zip(urow.iter_mut()).zip(srow) {
                *o /= z;
                *u = (x - max).min(700.0).exp() / z;
            }
        }
        let op = Op::MaskedSoftmax {
            scores: self.id,
            mask: mask.id,
            unmasked,
        };
        Ok(self.binary(mask, Tensor::from_parts(s.shape().to_vec(), out), op))
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let n = x.cols();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(dim_err("layer_norm", &x, &gv));
        }
        let rows = x.numel() / n;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(Tensor::from_parts(x.shape().to_vec(), out), op, rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Mean over rows: m×n → [n].
    pub fn mean_rows(&self) -> Var<'t> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let mut acc = vec![0.0; n];
        for row in a.data().chunks(n) {
            acc.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        acc.iter_mut().for_each(|s| *s /= m as f64);
        self.unary(Tensor::vector(acc), Op::MeanAxis0(self.id))
    }

    /// Mean over columns: m×n → [m].
    pub fn mean_cols(&self) -> Var<'t> {
        let a = self.value();
        let n = a.cols();
        let data = a
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        self.unary(Tensor::vector(data), Op::MeanAxis1(self.id))
    }

    /// Sub-matrix made of the listed rows and columns, in the given order.
    pub fn gather(&self, rows: &[usize], cols: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if !a.is_matrix() {
            return contract(format!("gather needs a matrix, got {:?}", a.shape()));
        }
        let (m, n) = (a.rows(), a.cols());
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return contract(format!("gather index out of range for shape {:?}", a.shape()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = a.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::from_parts(vec![rows.len(), cols.len()], data);
        let op = Op::Gather {
            src: self.id,
            rows: rows.to_vec(),
            cols: cols.to_vec(),
        };
        Ok(self.unary(out, op))
    }

    pub fn slice(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var<'t>> {
        let rows: Vec<usize> = rows.collect();
        let cols: Vec<usize> = cols.collect();
        self.gather(&rows, &cols)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let cols: Vec<usize> = (0..self.value().cols()).collect();
        self.gather(rows, &cols)
    }

    /// Entries of a 1-D tensor at `idx`.
    pub fn index(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 1 || idx.iter().any(|&i| i >= a.numel()) {
            return contract(format!("index out of range for shape {:?}", a.shape()));
        }
        let out = Tensor::vector(idx.iter().map(|&i| a.data()[i]).collect());
        Ok(self.unary(out, Op::Index(self.id, idx.to_vec())))
    }

    /// Places the entries of a 1-D tensor at `idx` in a zero vector of length `len`.
    pub fn scatter(&self, idx: &[usize], len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != [idx.len()] || idx.iter().any(|&i| i >= len) {
            return contract(format!(
                "scatter of {:?} into length {len} with {} indices",
                a.shape(),
                idx.len()
            ));
        }
        let mut data = vec![0.0; len];
        for (&i, &x) in idx.iter().zip(a.data()) {
            data[i] = x;
        }
        Ok(self.unary(Tensor::vector(data), Op::Scatter(self.id, idx.to_vec())))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = first.value().rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            if !v.is_matrix() || v.rows() != m {
                return Err(dim_err("concat_cols", &values[0], v));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::ConcatCols(parts.iter().map(|p| p.id).collect());
        Ok(first.tape.push(Tensor::from_parts(vec![m, total], data), op, rg))
    }

    /// Stacks matrices with equal column counts; 1-D inputs are concatenated.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let vector = values[0].shape().len() == 1;
        let n = values[0].cols();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            if (v.shape().len() == 1) != vector || (!vector && v.cols() != n) {
                return Err(dim_err("concat_rows", &values[0], v));
            }
        }
        let data: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let shape = if vector {
            vec![data.len()]
        } else {
            vec![data.len() / n.max(1), n]
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::ConcatRows(parts.iter().map(|p| p.id).collect());
        Ok(first.tape.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Broadcasts a length-n vector to an m×n matrix.
    pub fn repeat_rows(&self, m: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 1 {
            return contract(format!("repeat_rows needs a vector, got {:?}", a.shape()));
        }
        let n = a.numel();
        let data = a.data().repeat(m);
        Ok(self.unary(Tensor::from_parts(vec![m, n], data), Op::RepeatRows(self.id)))
    }

    /// Forward value `hard`, gradient passed straight through to `self`.
    pub fn straight_through(&self, hard: Tensor) -> Result<Var<'t>> {
        if hard.shape() != self.value().shape() {
            return Err(dim_err("straight_through", &self.value(), &hard));
        }
        Ok(self.unary(hard, Op::StraightThrough(self.id)))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}
