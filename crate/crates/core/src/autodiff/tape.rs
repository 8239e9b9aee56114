use std::cell::RefCell;
use std::fmt;

use super::{numel, Tensor};
use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Abs(usize),
    Sqrt(usize),
    Recip(usize),
    Dot(usize, usize),
    Outer(usize, usize),
    QuadForm {
        z: usize,
        m: usize,
    },
    Sum(usize),
    SoftThreshold {
        x: usize,
        gamma: usize,
    },
    ColumnExcluding {
        m: usize,
        i: usize,
    },
    Entry {
        m: usize,
        row: usize,
        col: usize,
    },
    SubmatrixExcluding {
        m: usize,
        i: usize,
    },
    ReplaceRowCol {
        m: usize,
        i: usize,
        u: usize,
        d: usize,
    },
    EmbedBlock {
        m11: usize,
        m12: usize,
        m22: usize,
        i: usize,
    },
    Stack(Vec<usize>),
    InvSpd(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and reverse insertion order is a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `var`, materialising zeros when absent.
    pub fn wrt_or_zero(&self, var: Var<'_>) -> Vec<f64> {
        self.wrt(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.len()])
    }

    /// Adds the gradient with respect to `var` into `tensor`'s buffer.
    pub fn accumulate(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        tensor.accumulate_grad(&self.wrt_or_zero(var))
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if numel(a) == 1 {
        Ok((b.to_vec(), Broadcast::LeftScalar))
    } else if numel(b) == 1 {
        Ok((a.to_vec(), Broadcast::RightScalar))
    } else {
        Err(Error::Dimension(format!(
            "cannot combine shapes {a:?} and {b:?}"
        )))
    }
}

fn excluding(p: usize, i: usize) -> impl Iterator<Item = usize> {
    (0..p).filter(move |&j| j != i)
}

fn square_dim(shape: &[usize], what: &str) -> Result<usize> {
    match shape {
        [r, c] if r == c => Ok(*r),
        _ => Err(Error::Dimension(format!(
            "{what} expects a square matrix, got {shape:?}"
        ))),
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf holding a copy of `tensor`; it participates in
    /// differentiation iff `tensor.requires_grad()`.
    pub fn tensor(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Differentiable leaf built from raw parts.
    pub fn param(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.tensor(&t))
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.tensor(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Stacks scalars into a vector.
    pub fn stack(&self, items: &[Var<'_>]) -> Result<Var<'_>> {
        let nodes = self.nodes.borrow();
        let mut value = Vec::with_capacity(items.len());
        let mut rg = false;
        for v in items {
            let node = &nodes[v.id];
            if node.value.len() != 1 {
                return Err(Error::Dimension(format!(
                    "stack expects scalars, got shape {:?}",
                    node.shape
                )));
            }
            value.push(node.value[0]);
            rg |= node.requires_grad;
        }
        drop(nodes);
        let ids = items.iter().map(|v| v.id).collect();
        Ok(self.push(vec![items.len()], value, Op::Stack(ids), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// Adds `g` (shape of the output) into operand `id`, summing when the
/// operand was broadcast as a scalar.
fn accumulate_broadcast(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    scalar_side: bool,
    contribution: impl Iterator<Item = f64>,
) {
    if let Some(buf) = slot(nodes, grads, id) {
        if scalar_side {
            buf[0] += contribution.sum::<f64>();
        } else {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
    }
}

fn bcast_kind(nodes: &[Node], a: usize, b: usize) -> Broadcast {
    // shapes were validated at construction
    broadcast(&nodes[a].shape, &nodes[b].shape)
        .map(|(_, k)| k)
        .unwrap_or(Broadcast::Same)
}

fn at(values: &[f64], k: usize, scalar: bool) -> f64 {
    if scalar {
        values[0]
    } else {
        values[k]
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = slot(nodes, grads, a) {
                for r in 0..m {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[r * n + j] * bv[c * n + j];
                        }
                        ga[r * k + c] += acc;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for r in 0..m {
                    for c in 0..k {
                        let arc = av[r * k + c];
                        if arc == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[c * n + j] += arc * g[r * n + j];
                        }
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let sign = if matches!(nodes[id].op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            let kind = bcast_kind(nodes, a, b);
            accumulate_broadcast(
                nodes,
                grads,
                a,
                matches!(kind, Broadcast::LeftScalar),
                g.iter().copied(),
            );
            accumulate_broadcast(
                nodes,
                grads,
                b,
                matches!(kind, Broadcast::RightScalar),
                g.iter().map(|x| sign * x),
            );
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let kind = bcast_kind(nodes, a, b);
            let ls = matches!(kind, Broadcast::LeftScalar);
            let rs = matches!(kind, Broadcast::RightScalar);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            accumulate_broadcast(
                nodes,
                grads,
                a,
                ls,
                g.iter().enumerate().map(|(k, x)| x * at(bv, k, rs)),
            );
            accumulate_broadcast(
                nodes,
                grads,
                b,
                rs,
                g.iter().enumerate().map(|(k, x)| x * at(av, k, ls)),
            );
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        ga[k] += g[k];
                    } else if av[k] < 0.0 {
                        ga[k] -= g[k];
                    }
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] / (2.0 * out[k]);
                }
            }
        }
        Op::Recip(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] -= g[k] * out[k] * out[k];
                }
            }
        }
        Op::Dot(a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = slot(nodes, grads, a) {
                for k in 0..ga.len() {
                    ga[k] += g[0] * bv[k];
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for k in 0..gb.len() {
                    gb[k] += g[0] * av[k];
                }
            }
        }
        Op::Outer(a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, n) = (av.len(), bv.len());
            if let Some(ga) = slot(nodes, grads, a) {
                for r in 0..m {
                    ga[r] += (0..n).map(|c| g[r * n + c] * bv[c]).sum::<f64>();
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for c in 0..n {
                    gb[c] += (0..m).map(|r| g[r * n + c] * av[r]).sum::<f64>();
                }
            }
        }
        Op::QuadForm { z, m } => {
            let (z, m) = (*z, *m);
            let zv = &nodes[z].value;
            let mv = &nodes[m].value;
            let n = zv.len();
            if let Some(gz) = slot(nodes, grads, z) {
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += (mv[r * n + c] + mv[c * n + r]) * zv[c];
                    }
                    gz[r] += g[0] * acc;
                }
            }
            if let Some(gm) = slot(nodes, grads, m) {
                for r in 0..n {
                    for c in 0..n {
                        gm[r * n + c] += g[0] * zv[r] * zv[c];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::SoftThreshold { x, gamma } => {
            let (x, gamma) = (*x, *gamma);
            let xv = &nodes[x].value;
            let gv = &nodes[gamma].value;
            let gs = gv.len() == 1 && xv.len() != 1;
            let active = |k: usize| xv[k].abs() > at(gv, k, gs);
            accumulate_broadcast(
                nodes,
                grads,
                x,
                false,
                (0..g.len()).map(|k| if active(k) { g[k] } else { 0.0 }),
            );
            accumulate_broadcast(
                nodes,
                grads,
                gamma,
                gs,
                (0..g.len()).map(|k| {
                    if active(k) {
                        -g[k] * xv[k].signum()
                    } else {
                        0.0
                    }
                }),
            );
        }
        Op::ColumnExcluding { m, i } => {
            let p = nodes[*m].shape[0];
            if let Some(gm) = slot(nodes, grads, *m) {
                for (k, r) in excluding(p, *i).enumerate() {
                    gm[r * p + i] += g[k];
                }
            }
        }
        Op::Entry { m, row, col } => {
            let p = nodes[*m].shape[1];
            if let Some(gm) = slot(nodes, grads, *m) {
                gm[row * p + col] += g[0];
            }
        }
        Op::SubmatrixExcluding { m, i } => {
            let p = nodes[*m].shape[0];
            let q = p - 1;
            if let Some(gm) = slot(nodes, grads, *m) {
                for (k, r) in excluding(p, *i).enumerate() {
                    for (l, c) in excluding(p, *i).enumerate() {
                        gm[r * p + c] += g[k * q + l];
                    }
                }
            }
        }
        Op::ReplaceRowCol { m, i, u, d } => {
            let (m, i, u, d) = (*m, *i, *u, *d);
            let p = nodes[m].shape[0];
            if let Some(gm) = slot(nodes, grads, m) {
                for r in excluding(p, i) {
                    for c in excluding(p, i) {
                        gm[r * p + c] += g[r * p + c];
                    }
                }
            }
            if let Some(gu) = slot(nodes, grads, u) {
                for (k, r) in excluding(p, i).enumerate() {
                    gu[k] += g[r * p + i] + g[i * p + r];
                }
            }
            if let Some(gd) = slot(nodes, grads, d) {
                gd[0] += g[i * p + i];
            }
        }
        Op::EmbedBlock { m11, m12, m22, i } => {
            let (m11, m12, m22, i) = (*m11, *m12, *m22, *i);
            let p = nodes[id].shape[0];
            let q = p - 1;
            if let Some(g11) = slot(nodes, grads, m11) {
                for (k, r) in excluding(p, i).enumerate() {
                    for (l, c) in excluding(p, i).enumerate() {
                        g11[k * q + l] += g[r * p + c];
                    }
                }
            }
            if let Some(g12) = slot(nodes, grads, m12) {
                for (k, r) in excluding(p, i).enumerate() {
                    g12[k] += g[r * p + i] + g[i * p + r];
                }
            }
            if let Some(g22) = slot(nodes, grads, m22) {
                g22[0] += g[i * p + i];
            }
        }
        Op::Stack(ids) => {
            for (k, &s) in ids.iter().enumerate() {
                if let Some(gs) = slot(nodes, grads, s) {
                    gs[0] += g[k];
                }
            }
        }
        Op::InvSpd(a) => {
            // The input is read as (X + Xᵀ)/2, so the adjoint is −Y·sym(G)·Y.
            let p = nodes[id].shape[0];
            let y = out;
            if let Some(ga) = slot(nodes, grads, *a) {
                let mut gy = vec![0.0; p * p];
                for r in 0..p {
                    for c in 0..p {
                        gy[r * p + c] = (0..p)
                            .map(|k| 0.5 * (g[r * p + k] + g[k * p + r]) * y[k * p + c])
                            .sum();
                    }
                }
                for r in 0..p {
                    for c in 0..p {
                        let v: f64 = (0..p).map(|k| y[r * p + k] * gy[k * p + c]).sum();
                        ga[r * p + c] -= v;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the stored value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// The value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    /// Same value as a non-differentiable leaf.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push(shape, value, Op::Leaf, false)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, value, op, self.rg())
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (shape, kind) = broadcast(&a.shape, &b.shape)?;
            let ls = matches!(kind, Broadcast::LeftScalar);
            let rs = matches!(kind, Broadcast::RightScalar);
            let value = (0..numel(&shape))
                .map(|k| f(at(&a.value, k, ls), at(&b.value, k, rs)))
                .collect();
            (shape, value)
        };
        Ok(self.tape.push(shape, value, op, self.rg() || other.rg()))
    }

    /// Matrix product; `other` may be a matrix `[k, n]` or a vector `[k]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = match a.shape[..] {
                [m, k] => (m, k),
                _ => {
                    return Err(Error::Dimension(format!(
                        "matmul lhs must be a matrix, got {:?}",
                        a.shape
                    )))
                }
            };
            let (kb, n, out_shape) = match b.shape[..] {
                [kb, n] => (kb, n, vec![m, n]),
                [kb] => (kb, 1, vec![m]),
                _ => {
                    return Err(Error::Dimension(format!(
                        "matmul rhs must be a matrix or vector, got {:?}",
                        b.shape
                    )))
                }
            };
            if kb != k {
                return Err(Error::Dimension(format!(
                    "matmul inner dimensions differ: {:?} x {:?}",
                    a.shape, b.shape
                )));
            }
            let mut value = vec![0.0; m * n];
            for r in 0..m {
                let row = &a.value[r * k..(r + 1) * k];
                let out = &mut value[r * n..(r + 1) * n];
                for (c, &arc) in row.iter().enumerate() {
                    if arc == 0.0 {
                        continue;
                    }
                    let brow = &b.value[c * n..(c + 1) * n];
                    for (o, bv) in out.iter_mut().zip(brow) {
                        *o += arc * bv;
                    }
                }
            }
            (out_shape, value, m, k, n)
        };
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `self / other` as `self · other⁻¹`.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other.reciprocal()?)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    fn check_positive(&self, what: &str) -> Result<()> {
        if self.rg() {
            let bad = self.with_value(|v| v.iter().copied().find(|&x| !(x > 0.0)));
            if let Some(x) = bad {
                return Err(Error::Domain(format!(
                    "{what} of non-positive value {x:e} on a differentiated path"
                )));
            }
        }
        Ok(())
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.check_positive("sqrt")?;
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    pub fn reciprocal(&self) -> Result<Var<'t>> {
        self.check_positive("reciprocal")?;
        Ok(self.unary(Op::Recip(self.id), |x| 1.0 / x))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.with_value(|v| v.iter().sum());
        self.tape
            .push(Vec::new(), vec![total], Op::Sum(self.id), self.rg())
    }

    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 1 || a.shape != b.shape {
                return Err(Error::Dimension(format!(
                    "dot needs equal-length vectors, got {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            a.value.iter().zip(&b.value).map(|(x, y)| x * y).sum()
        };
        Ok(self.tape.push(
            Vec::new(),
            vec![value],
            Op::Dot(self.id, other.id),
            self.rg() || other.rg(),
        ))
    }

    pub fn outer(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 1 || b.shape.len() != 1 {
                return Err(Error::Dimension(format!(
                    "outer needs vectors, got {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            let mut value = Vec::with_capacity(a.value.len() * b.value.len());
            for x in &a.value {
                value.extend(b.value.iter().map(|y| x * y));
            }
            (vec![a.value.len(), b.value.len()], value)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Outer(self.id, other.id),
            self.rg() || other.rg(),
        ))
    }

    /// `selfᵀ · m · self` for a vector `self` and a square matrix `m`.
    pub fn quadratic_form(&self, m: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (z, mat) = (&nodes[self.id], &nodes[m.id]);
            let n = square_dim(&mat.shape, "quadratic_form")?;
            if z.shape != [n] {
                return Err(Error::Dimension(format!(
                    "quadratic_form vector {:?} vs matrix {:?}",
                    z.shape, mat.shape
                )));
            }
            quad(&z.value, &mat.value)
        };
        Ok(self.tape.push(
            Vec::new(),
            vec![value],
            Op::QuadForm {
                z: self.id,
                m: m.id,
            },
            self.rg() || m.rg(),
        ))
    }

    /// Elementwise `sign(x)·max(|x| − γ, 0)`; `gamma` has the same shape or is a scalar.
    pub fn soft_threshold(&self, gamma: Var<'t>) -> Result<Var<'t>> {
        if gamma.with_value(|v| v.iter().any(|&g| g < 0.0 || g.is_nan())) {
            return Err(Error::Domain(
                "soft-threshold level must be non-negative".into(),
            ));
        }
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g) = (&nodes[self.id], &nodes[gamma.id]);
            let gs = if x.shape == g.shape {
                false
            } else if g.value.len() == 1 {
                true
            } else {
                return Err(Error::Dimension(format!(
                    "soft_threshold level {:?} vs input {:?}",
                    g.shape, x.shape
                )));
            };
            let value = x
                .value
                .iter()
                .enumerate()
                .map(|(k, &xv)| soft_threshold(xv, at(&g.value, k, gs)))
                .collect();
            (x.shape.clone(), value)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::SoftThreshold {
                x: self.id,
                gamma: gamma.id,
            },
            self.rg() || gamma.rg(),
        ))
    }

    /// Column `i` of a square matrix with entry `i` removed.
    pub fn column_excluding(&self, i: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let p = square_dim(&n.shape, "column_excluding")?;
            check_index(i, p)?;
            excluding(p, i)
                .map(|r| n.value[r * p + i])
                .collect::<Vec<_>>()
        };
        let len = value.len();
        Ok(self.tape.push(
            vec![len],
            value,
            Op::ColumnExcluding { m: self.id, i },
            self.rg(),
        ))
    }

    pub fn entry(&self, row: usize, col: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (r, c) = match n.shape[..] {
                [r, c] => (r, c),
                _ => return Err(Error::Dimension(format!("entry on shape {:?}", n.shape))),
            };
            if row >= r || col >= c {
                return Err(Error::Dimension(format!(
                    "entry ({row}, {col}) outside {r}x{c}"
                )));
            }
            n.value[row * c + col]
        };
        Ok(self.tape.push(
            Vec::new(),
            vec![value],
            Op::Entry {
                m: self.id,
                row,
                col,
            },
            self.rg(),
        ))
    }

    /// The square matrix with row and column `i` removed.
    pub fn submatrix_excluding(&self, i: usize) -> Result<Var<'t>> {
        let (q, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let p = square_dim(&n.shape, "submatrix_excluding")?;
            check_index(i, p)?;
            let mut value = Vec::with_capacity((p - 1) * (p - 1));
            for r in excluding(p, i) {
                value.extend(excluding(p, i).map(|c| n.value[r * p + c]));
            }
            (p - 1, value)
        };
        Ok(self.tape.push(
            vec![q, q],
            value,
            Op::SubmatrixExcluding { m: self.id, i },
            self.rg(),
        ))
    }

    /// Copy of a symmetric matrix with the off-diagonal part of row/column
    /// `i` replaced by `u` and entry `(i, i)` replaced by `d`.
    pub fn replace_row_col(&self, i: usize, u: Var<'t>, d: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let p = square_dim(&n.shape, "replace_row_col")?;
            check_index(i, p)?;
            let (uv, dv) = (&nodes[u.id], &nodes[d.id]);
            if uv.value.len() != p - 1 || dv.value.len() != 1 {
                return Err(Error::Dimension(format!(
                    "replace_row_col needs u of length {} and scalar d",
                    p - 1
                )));
            }
            let mut value = n.value.clone();
            for (k, r) in excluding(p, i).enumerate() {
                value[r * p + i] = uv.value[k];
                value[i * p + r] = uv.value[k];
            }
            value[i * p + i] = dv.value[0];
            (n.shape.clone(), value)
        };
        let rg = self.rg() || u.rg() || d.rg();
        Ok(self.tape.push(
            shape,
            value,
            Op::ReplaceRowCol {
                m: self.id,
                i,
                u: u.id,
                d: d.id,
            },
            rg,
        ))
    }

    /// Assembles a `p × p` symmetric matrix from its partition at index `i`;
    /// `self` is the `(p−1) × (p−1)` block.
    pub fn embed_block(&self, col: Var<'t>, diag: Var<'t>, i: usize) -> Result<Var<'t>> {
        let (p, value) = {
            let nodes = self.tape.nodes.borrow();
            let b11 = &nodes[self.id];
            let q = square_dim(&b11.shape, "embed_block")?;
            let p = q + 1;
            check_index(i, p)?;
            let (cv, dv) = (&nodes[col.id], &nodes[diag.id]);
            if cv.value.len() != q || dv.value.len() != 1 {
                return Err(Error::Dimension(format!(
                    "embed_block needs a column of length {q} and a scalar"
                )));
            }
            let mut value = vec![0.0; p * p];
            for (k, r) in excluding(p, i).enumerate() {
                for (l, c) in excluding(p, i).enumerate() {
                    value[r * p + c] = b11.value[k * q + l];
                }
                value[r * p + i] = cv.value[k];
                value[i * p + r] = cv.value[k];
            }
            value[i * p + i] = dv.value[0];
            (p, value)
        };
        let rg = self.rg() || col.rg() || diag.rg();
        Ok(self.tape.push(
            vec![p, p],
            value,
            Op::EmbedBlock {
                m11: self.id,
                m12: col.id,
                m22: diag.id,
                i,
            },
            rg,
        ))
    }

    /// Inverse of a symmetric positive-definite matrix. The input is read
    /// through its symmetric part.
    pub fn inv_spd(&self) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let p = square_dim(&n.shape, "inv_spd")?;
            (n.shape.clone(), linalg::spd_inverse_raw(p, &n.value)?)
        };
        Ok(self.tape.push(shape, value, Op::InvSpd(self.id), self.rg()))
    }
}

fn check_index(i: usize, p: usize) -> Result<()> {
    if i >= p {
        Err(Error::Dimension(format!(
            "index {i} out of range for dimension {p}"
        )))
    } else {
        Ok(())
    }
}

pub(crate) fn soft_threshold(x: f64, gamma: f64) -> f64 {
    x.signum() * (x.abs() - gamma).max(0.0)
}

pub(crate) fn quad(z: &[f64], m: &[f64]) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for r in 0..n {
        let row = &m[r * n..(r + 1) * n];
        let mz: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
        total += z[r] * mz;
    }
    total
}
