//! Relative L_p, H1 and L-infinity errors, as plain numbers and as
//! differentiable tape expressions.
//!
//! All norms run jointly over every channel, so a complex field stored as
//! (real, imaginary) planes is measured by its modulus.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::quadtree::morton_decode;
use crate::tensor::Tensor;

fn check_pair(op: &'static str, v: &GridField, u: &GridField) -> Result<()> {
    if !v.same_shape(u) {
        return Err(Error::shape(
            op,
            &[v.resolution(), v.resolution(), v.channels()],
            &[u.resolution(), u.resolution(), u.channels()],
        ));
    }
    Ok(())
}

fn lp_norm(x: impl Iterator<Item = f64>, p: f64) -> f64 {
    if p == 1.0 {
        x.map(f64::abs).sum()
    } else if p == 2.0 {
        x.map(|a| a * a).sum::<f64>().sqrt()
    } else {
        x.map(|a| a.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `||v - u||_p / ||u||_p` over all entries.
pub fn rel_lp(v: &GridField, u: &GridField, p: f64) -> Result<f64> {
    check_pair("rel_lp", v, u)?;
    let den = lp_norm(u.data().iter().copied(), p);
    if den == 0.0 {
        return Err(Error::DegenerateTarget { sample: 0 });
    }
    let num = lp_norm(v.data().iter().zip(u.data()).map(|(a, b)| a - b), p);
    Ok(num / den)
}

fn batch_mean(
    vs: &[GridField],
    us: &[GridField],
    f: impl Fn(&GridField, &GridField) -> Result<f64>,
) -> Result<f64> {
    if vs.len() != us.len() || vs.is_empty() {
        return Err(Error::shape("batch", &[vs.len()], &[us.len()]));
    }
    let mut acc = 0.0;
    for (i, (v, u)) in vs.iter().zip(us).enumerate() {
        acc += f(v, u).map_err(|e| match e {
            Error::DegenerateTarget { .. } => Error::DegenerateTarget { sample: i },
            other => other,
        })?;
    }
    Ok(acc / vs.len() as f64)
}

/// Batch mean of [`rel_lp`].
pub fn rel_lp_loss(vs: &[GridField], us: &[GridField], p: f64) -> Result<f64> {
    batch_mean(vs, us, |v, u| rel_lp(v, u, p))
}

/// Largest absolute entry difference.
pub fn l_inf(v: &GridField, u: &GridField) -> Result<f64> {
    check_pair("l_inf", v, u)?;
    Ok(v.data()
        .iter()
        .zip(u.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Derivative of plane `d` (row-major `n x n`) at pixel `(x, y)` along x
/// (`axis = 0`) or y; central inside, one-sided on the border.
fn diff(d: &[f64], n: usize, x: usize, y: usize, axis: usize, dx: f64) -> f64 {
    let at = |x: usize, y: usize| d[y * n + x];
    let i = if axis == 0 { x } else { y };
    if n < 2 {
        return 0.0;
    }
    let step = |i: usize| if axis == 0 { at(i, y) } else { at(x, i) };
    if i == 0 {
        (step(1) - step(0)) / dx
    } else if i == n - 1 {
        (step(n - 1) - step(n - 2)) / dx
    } else {
        (step(i + 1) - step(i - 1)) / (2.0 * dx)
    }
}

/// Squared L2 part and squared gradient part of the discrete H1 norm.
fn h1_parts(d: &GridField, dx: f64) -> (f64, f64) {
    let n = d.resolution();
    let mut l2 = 0.0;
    let mut semi = 0.0;
    for c in 0..d.channels() {
        let plane = d.plane(c);
        for y in 0..n {
            for x in 0..n {
                l2 += plane[y * n + x].powi(2);
                semi += diff(&plane, n, x, y, 0, dx).powi(2) + diff(&plane, n, x, y, 1, dx).powi(2);
            }
        }
    }
    (l2 * dx * dx, semi * dx * dx)
}

/// Discrete H1 norm of a single field.
pub fn h1(field: &GridField, dx: f64) -> f64 {
    let (a, b) = h1_parts(field, dx);
    (a + b).sqrt()
}

/// Discrete H1 semi-norm (gradient part only).
pub fn h1_seminorm(field: &GridField, dx: f64) -> f64 {
    h1_parts(field, dx).1.sqrt()
}

fn difference(v: &GridField, u: &GridField) -> GridField {
    let data = v.data().iter().zip(u.data()).map(|(a, b)| a - b).collect();
    GridField::new(v.resolution(), v.channels(), data).expect("same shape")
}

/// `||v - u||_{H1}`.
pub fn h1_norm(v: &GridField, u: &GridField, dx: f64) -> Result<f64> {
    check_pair("h1_norm", v, u)?;
    Ok(h1(&difference(v, u), dx))
}

pub fn rel_h1(v: &GridField, u: &GridField, dx: f64) -> Result<f64> {
    check_pair("rel_h1", v, u)?;
    let den = h1(u, dx);
    if den == 0.0 {
        return Err(Error::DegenerateTarget { sample: 0 });
    }
    Ok(h1(&difference(v, u), dx) / den)
}

pub fn rel_h1_loss(vs: &[GridField], us: &[GridField], dx: f64) -> Result<f64> {
    batch_mean(vs, us, |v, u| rel_h1(v, u, dx))
}

/// Per-sample error statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel_l1: f64,
    pub rel_l2: f64,
    pub l_inf: f64,
    pub h1: f64,
    pub rel_h1: f64,
}

impl MetricReport {
    pub fn compute(v: &GridField, u: &GridField, dx: f64) -> Result<Self> {
        Ok(MetricReport {
            rel_l1: rel_lp(v, u, 1.0)?,
            rel_l2: rel_lp(v, u, 2.0)?,
            l_inf: l_inf(v, u)?,
            h1: h1_norm(v, u, dx)?,
            rel_h1: rel_h1(v, u, dx)?,
        })
    }

    /// Column means.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut m = MetricReport::default();
        for r in reports {
            m.rel_l1 += r.rel_l1;
            m.rel_l2 += r.rel_l2;
            m.l_inf += r.l_inf;
            m.h1 += r.h1;
            m.rel_h1 += r.rel_h1;
        }
        m.rel_l1 /= n;
        m.rel_l2 /= n;
        m.l_inf /= n;
        m.h1 /= n;
        m.rel_h1 /= n;
        m
    }
}

/// Finite-difference neighbours and weights for rows laid out in Morton
/// order, as consumed by the tape losses.
#[derive(Clone, Debug)]
pub struct H1Stencil {
    plus: [Arc<[usize]>; 2],
    minus: [Arc<[usize]>; 2],
    weight: [Vec<f64>; 2],
    pub grid_spacing: f64,
}

impl H1Stencil {
    pub fn morton(depth: usize, grid_spacing: f64) -> Self {
        let n = 1usize << depth;
        let leaves = n * n;
        let code = |x: usize, y: usize| {
            crate::quadtree::morton_encode(x as u32, y as u32, depth as u32).expect("in range") as usize
        };
        let mut plus = [Vec::with_capacity(leaves), Vec::with_capacity(leaves)];
        let mut minus = [Vec::with_capacity(leaves), Vec::with_capacity(leaves)];
        let mut weight = [Vec::with_capacity(leaves), Vec::with_capacity(leaves)];
        for m in 0..leaves {
            let (x, y) = morton_decode(m as u64);
            let (x, y) = (x as usize, y as usize);
            for axis in 0..2 {
                let i = if axis == 0 { x } else { y };
                let at = |j: usize| if axis == 0 { code(j, y) } else { code(x, j) };
                let (hi, lo, w) = if i == 0 {
                    (at(1), at(0), 1.0 / grid_spacing)
                } else if i == n - 1 {
                    (at(n - 1), at(n - 2), 1.0 / grid_spacing)
                } else {
                    (at(i + 1), at(i - 1), 0.5 / grid_spacing)
                };
                plus[axis].push(hi);
                minus[axis].push(lo);
                weight[axis].push(w);
            }
        }
        let [px, py] = plus;
        let [mx, my] = minus;
        H1Stencil {
            plus: [px.into(), py.into()],
            minus: [mx.into(), my.into()],
            weight,
            grid_spacing,
        }
    }

    pub fn rows(&self) -> usize {
        self.weight[0].len()
    }
}

/// Squared H1 norm of Morton-ordered rows `d: [4^L x c]` on the tape.
fn tape_h1_sq(tape: &mut Tape, d: Var, st: &H1Stencil) -> Result<Var> {
    let c = tape.shape(d)[1];
    let dx2 = st.grid_spacing * st.grid_spacing;
    let sq = tape.mul(d, d)?;
    let mut total = tape.sum(sq);
    for axis in 0..2 {
        let hi = tape.gather_rows(d, st.plus[axis].clone())?;
        let lo = tape.gather_rows(d, st.minus[axis].clone())?;
        let diff = tape.sub(hi, lo)?;
        let w: Vec<f64> = st.weight[axis].iter().flat_map(|&w| std::iter::repeat(w).take(c)).collect();
        let w = tape.constant(&Tensor::new(vec![st.rows(), c], w)?);
        let g = tape.mul(diff, w)?;
        let g2 = tape.mul(g, g)?;
        let s = tape.sum(g2);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, dx2))
}

/// Plain H1 norm of Morton-ordered rows, matching [`tape_rel_h1`].
pub fn rows_h1(rows: &Tensor, st: &H1Stencil) -> Result<f64> {
    let mut tape = Tape::new();
    let d = tape.constant(rows);
    let s = tape_h1_sq(&mut tape, d, st)?;
    Ok(tape.value(s)[0].sqrt())
}

/// `||pred - target||_{H1} / ||target||_{H1}` with rows in Morton order.
pub fn tape_rel_h1(tape: &mut Tape, pred: Var, target: &Tensor, st: &H1Stencil) -> Result<Var> {
    let den = rows_h1(target, st)?;
    if den == 0.0 {
        return Err(Error::DegenerateTarget { sample: 0 });
    }
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let sq = tape_h1_sq(tape, d, st)?;
    let num = tape.sqrt(sq);
    Ok(tape.scale(num, 1.0 / den))
}

/// `||pred - target||_p / ||target||_p` on the tape.
pub fn tape_rel_lp(tape: &mut Tape, pred: Var, target: &Tensor, p: f64) -> Result<Var> {
    let den = lp_norm(target.data().iter().copied(), p);
    if den == 0.0 {
        return Err(Error::DegenerateTarget { sample: 0 });
    }
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let num = if p == 2.0 {
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        tape.sqrt(s)
    } else {
        let a = tape.abs(d);
        let a = if p == 1.0 { a } else { tape.powf(a, p) };
        let s = tape.sum(a);
        if p == 1.0 {
            s
        } else {
            tape.powf(s, 1.0 / p)
        }
    };
    Ok(tape.scale(num, 1.0 / den))
}
