//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] walks it once in reverse, accumulating exact
//! vector-Jacobian products. One tape is built per forward/backward cycle and
//! dropped afterwards, so no state leaks across batches.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Row index meaning "insert a zero row" in [`Tape::gather_rows`].
pub const PAD: usize = usize::MAX;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Binary(ElementwiseOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Affine(Var, Var, Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Powf(Var, f64),
    GatherRows(Var, Arc<[usize]>),
    ScatterAdd { dst: Var, src: Var, idx: Arc<[usize]> },
    Rope { x: Var, positions: Arc<[i64]>, base: f64 },
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU; smooth and fixes zero.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x)))
}

/// `tanh` through one `exp`; libm's version dominates GELU-heavy passes.
#[inline]
fn tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp_m1();
    e / (e + 2.0)
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Per-channel-pair inverse frequencies `base^(-2d/m)`.
pub fn rope_inv_freq(width: usize, base: f64) -> Vec<f64> {
    (0..width / 2)
        .map(|d| base.powf(-2.0 * d as f64 / width as f64))
        .collect()
}

/// Rotates each consecutive channel pair `(2d, 2d + 1)` of `v` by
/// `pos * base^(-2d/m)`.
pub fn rope_rotate(v: &[f64], pos: i64, base: f64) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even width, got {}", v.len())));
    }
    let mut out = v.to_vec();
    rotate_row(&mut out, pos as f64, &rope_inv_freq(v.len(), base), 1.0);
    Ok(out)
}

/// Rotates each consecutive channel pair of `row` by `pos * inv_freq[d]`
/// (`sign = -1` applies the inverse rotation).
fn rotate_row(row: &mut [f64], pos: f64, inv_freq: &[f64], sign: f64) {
    for (d, f) in inv_freq.iter().enumerate() {
        let (s, c) = (sign * pos * f).sin_cos();
        let a = row[2 * d];
        let b = row[2 * d + 1];
        row[2 * d] = a * c - b * s;
        row[2 * d + 1] = a * s + b * c;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let p = &nodes[v.0];
    if !p.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; p.value.len()]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// A differentiable input whose gradient is retained after backward.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers parameter `id` of a parameter set; its gradient is reported
    /// by [`Tape::param_grads`].
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), needs)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, p) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[n, k], &[k2, p]));
        }
        let mut out = vec![0.0; n * p];
        gemm(n, k, p, self.value(a), self.value(b), &mut out, 0.0);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![n, p], out, Op::MatMul(a, b), needs))
    }

    /// `x W + b` with the bias row broadcast, as one node.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.dims2(x, "affine")?;
        let (k2, p) = self.dims2(w, "affine")?;
        if k != k2 || self.value(bias).len() != p {
            return Err(Error::shape("affine", &[n, k, p], &[k2, self.value(bias).len()]));
        }
        let mut out = Vec::with_capacity(n * p);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias));
        }
        gemm(n, k, p, self.value(x), self.value(w), &mut out, 1.0);
        let needs = self.needs(&[x, w, bias]);
        Ok(self.push(vec![n, p], out, Op::Affine(x, w, bias), needs))
    }

    /// Pointwise binary op; either operand may be a one-element scalar.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let shape = if la == lb {
            self.shape(a).to_vec()
        } else if lb == 1 {
            self.shape(a).to_vec()
        } else if la == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(Error::shape("elementwise", self.shape(a), self.shape(b)));
        };
        let n = la.max(lb);
        let (va, vb) = (self.value(a), self.value(b));
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
        };
        let out = (0..n)
            .map(|i| f(va[if la == 1 { 0 } else { i }], vb[if lb == 1 { 0 } else { i }]))
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Binary(op, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| c + x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, Op::AddScalar(a), needs)
    }

    /// Adds the row vector `bias` (length m) to every row of `x: n x m`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "add_bias")?;
        if self.value(bias).len() != m {
            return Err(Error::shape("add_bias", &[n, m], self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m.max(1)) {
            add_into(row, b);
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(vec![n, m], out, Op::AddBias(x, bias), needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, op, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `x^p` for non-negative inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Selects rows of `t: n x m`. [`PAD`] entries produce zero rows.
    pub fn gather_rows(&mut self, t: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, m) = self.dims2(t, "gather_rows")?;
        let src = self.value(t);
        let mut out = vec![0.0; idx.len() * m];
        for (r, &i) in idx.iter().enumerate() {
            if i == PAD {
                continue;
            }
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            out[r * m..(r + 1) * m].copy_from_slice(&src[i * m..(i + 1) * m]);
        }
        let needs = self.needs(&[t]);
        Ok(self.push(vec![idx.len(), m], out, Op::GatherRows(t, idx), needs))
    }

    /// `dst` with row `r` of `src` added onto row `idx[r]`.
    pub fn scatter_add(&mut self, dst: Var, idx: Arc<[usize]>, src: Var) -> Result<Var> {
        let (n, m) = self.dims2(dst, "scatter_add")?;
        let (k, m2) = self.dims2(src, "scatter_add")?;
        if m != m2 || k != idx.len() {
            return Err(Error::shape("scatter_add", &[idx.len(), m], &[k, m2]));
        }
        let mut out = self.value(dst).to_vec();
        let s = self.value(src);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            add_into(&mut out[i * m..(i + 1) * m], &s[r * m..(r + 1) * m]);
        }
        let needs = self.needs(&[dst, src]);
        Ok(self.push(vec![n, m], out, Op::ScatterAdd { dst, src, idx }, needs))
    }

    /// Rotary encoding: row `r` has each channel pair `d` rotated by
    /// `positions[r] * base^(-2d/m)`.
    pub fn rope(&mut self, x: Var, positions: Arc<[i64]>, base: f64) -> Result<Var> {
        let (n, m) = self.dims2(x, "rope")?;
        if m % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even width, got {m}")));
        }
        if positions.len() != n {
            return Err(Error::shape("rope", &[n, m], &[positions.len()]));
        }
        let inv = rope_inv_freq(m, base);
        let mut out = self.value(x).to_vec();
        if m > 0 {
            for (row, &p) in out.chunks_exact_mut(m).zip(positions.iter()) {
                rotate_row(row, p as f64, &inv, 1.0);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![n, m], out, Op::Rope { x, positions, base }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), needs))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let p = self.nodes[b.0].shape[1];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = acc!(*a) {
                    gemm_nt(n, p, k, g, vb, ga);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(n, k, p, va, g, gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (la, lb) = (va.len(), vb.len());
                let at = |v: &[f64], l: usize, j: usize| v[if l == 1 { 0 } else { j }];
                if let Some(ga) = acc!(*a) {
                    for (j, gj) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add | ElementwiseOp::Sub => *gj,
                            ElementwiseOp::Mul => gj * at(vb, lb, j),
                        };
                        ga[if la == 1 { 0 } else { j }] += d;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (j, gj) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add => *gj,
                            ElementwiseOp::Sub => -gj,
                            ElementwiseOp::Mul => gj * at(va, la, j),
                        };
                        gb[if lb == 1 { 0 } else { j }] += d;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
            }
            Op::Affine(a, b, bias) => {
                let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let p = self.nodes[b.0].shape[1];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = acc!(*a) {
                    gemm_nt(n, p, k, g, vb, ga);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(n, k, p, va, g, gb);
                }
                if let Some(gbias) = acc!(*bias) {
                    if p > 0 {
                        for row in g.chunks_exact(p) {
                            add_into(gbias, row);
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let m = self.nodes[b.0].value.len();
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(*b) {
                    if m > 0 {
                        for row in g.chunks_exact(m) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Gelu(a) | Op::Relu(a) | Op::Abs(a) | Op::Sqrt(a) | Op::Powf(a, _) => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                let op = &node.op;
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        let d = match op {
                            Op::Gelu(_) => gelu_grad(x[j]),
                            Op::Relu(_) => f64::from(u8::from(x[j] > 0.0)),
                            Op::Abs(_) => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            // Subgradient 0 at the kink keeps perfect predictions finite.
                            Op::Sqrt(_) => {
                                if y[j] > 0.0 {
                                    0.5 / y[j]
                                } else {
                                    0.0
                                }
                            }
                            Op::Powf(_, p) => {
                                if x[j] == 0.0 && *p < 1.0 {
                                    0.0
                                } else {
                                    p * x[j].powf(p - 1.0)
                                }
                            }
                            _ => unreachable!(),
                        };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::GatherRows(t, idx) => {
                let m = node.shape[1];
                if let Some(gt) = acc!(*t) {
                    for (r, &src) in idx.iter().enumerate() {
                        if src != PAD {
                            add_into(&mut gt[src * m..(src + 1) * m], &g[r * m..(r + 1) * m]);
                        }
                    }
                }
            }
            Op::ScatterAdd { dst, src, idx } => {
                let m = node.shape[1];
                if let Some(gd) = acc!(*dst) {
                    add_into(gd, g);
                }
                if let Some(gs) = acc!(*src) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[r * m..(r + 1) * m], &g[i * m..(i + 1) * m]);
                    }
                }
            }
            Op::Rope { x, positions, base } => {
                let m = node.shape[1];
                let inv = rope_inv_freq(m, *base);
                if let Some(gx) = acc!(*x) {
                    if m > 0 {
                        let mut row = vec![0.0; m];
                        for (r, &p) in positions.iter().enumerate() {
                            row.copy_from_slice(&g[r * m..(r + 1) * m]);
                            rotate_row(&mut row, p as f64, &inv, -1.0);
                            add_into(&mut gx[r * m..(r + 1) * m], &row);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass w.r.t. a leaf or parameter.
    /// Trainable nodes the loss does not reach report zeros.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        let node = self.node(v);
        if !node.needs_grad {
            return None;
        }
        match self.grads.get(v.0) {
            Some(Some(g)) => Some(g.clone()),
            _ => Some(vec![0.0; node.value.len()]),
        }
    }

    /// `(parameter id, gradient)` for every registered trainable parameter.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => Some((
                    id,
                    self.grads
                        .get(i)
                        .and_then(|g| g.clone())
                        .unwrap_or_else(|| vec![0.0; n.value.len()]),
                )),
                _ => None,
            })
            .collect()
    }
}
