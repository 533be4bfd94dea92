//! Finite-difference Helmholtz solver:
//! `lap(u) + k0^2 n u = f` on a cell-centred grid with the absorbing
//! boundary `du/dnu = i k0 u`.
//!
//! The boundary is imposed through a ghost cell across each boundary face,
//! `(u_g - u_b) / h = i k0 (u_g + u_b) / 2`, so `u_g = gamma u_b`. The system
//! is factored by banded LU with partial pivoting and polished by iterative
//! refinement against the sparse operator.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::GridField;

/// Target relative residual of every solve.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// The sparse 5-point operator.
#[derive(Clone, Debug)]
pub struct HelmholtzOperator {
    n: usize,
    inv_h2: f64,
    diag: Vec<Complex64>,
}

impl HelmholtzOperator {
    /// `refr` is the row-major `n x n` refractive multiplier.
    pub fn new(refr: &[f64], n: usize, h: f64, k0: f64) -> Result<Self> {
        if refr.len() != n * n || n < 2 {
            return Err(Error::shape("helmholtz", &[n * n], &[refr.len()]));
        }
        let inv_h2 = 1.0 / (h * h);
        let half = Complex64::new(0.0, 0.5 * k0 * h);
        let gamma = (Complex64::new(1.0, 0.0) + half) / (Complex64::new(1.0, 0.0) - half);
        let mut diag = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let ghosts = [x == 0, x == n - 1, y == 0, y == n - 1].iter().filter(|&&b| b).count();
                let d = Complex64::new(-4.0 * inv_h2 + k0 * k0 * refr[y * n + x], 0.0)
                    + gamma * (ghosts as f64 * inv_h2);
                diag.push(d);
            }
        }
        Ok(HelmholtzOperator { n, inv_h2, diag })
    }

    pub fn size(&self) -> usize {
        self.n * self.n
    }

    pub fn apply(&self, u: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let mut s = self.diag[i] * u[i];
                let mut nb = Complex64::new(0.0, 0.0);
                if x > 0 {
                    nb += u[i - 1];
                }
                if x + 1 < n {
                    nb += u[i + 1];
                }
                if y > 0 {
                    nb += u[i - n];
                }
                if y + 1 < n {
                    nb += u[i + n];
                }
                s += nb * self.inv_h2;
                out.push(s);
            }
        }
        out
    }

    /// `||A u - f|| / ||f||` (0 when `f = 0` and `u = 0`).
    pub fn relative_residual(&self, u: &[Complex64], f: &[Complex64]) -> f64 {
        let au = self.apply(u);
        let r: f64 = au.iter().zip(f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let fnorm: f64 = f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if fnorm == 0.0 {
            r
        } else {
            r / fnorm
        }
    }

    /// Dense band copy, lower and upper bandwidth `n`.
    fn band(&self) -> BandLu {
        let n = self.n;
        let size = n * n;
        let mut lu = BandLu::zeros(size, n, n);
        for i in 0..size {
            lu.set(i, i, self.diag[i]);
            let (x, y) = (i % n, i / n);
            let w = Complex64::new(self.inv_h2, 0.0);
            if x > 0 {
                lu.set(i, i - 1, w);
            }
            if x + 1 < n {
                lu.set(i, i + 1, w);
            }
            if y > 0 {
                lu.set(i, i - n, w);
            }
            if y + 1 < n {
                lu.set(i, i + n, w);
            }
        }
        lu
    }
}

/// Column-major band storage with room for pivoting fill-in; entry
/// `(i, j)` lives at row `kl + ku + i - j` of column `j`.
struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    ab: Vec<Complex64>,
    piv: Vec<usize>,
}

impl BandLu {
    fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        BandLu {
            n,
            kl,
            ku,
            ld,
            ab: vec![Complex64::new(0.0, 0.0); ld * n],
            piv: vec![0; n],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ld
    }

    fn set(&mut self, i: usize, j: usize, v: Complex64) {
        let k = self.idx(i, j);
        self.ab[k] = v;
    }

    fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let kv = self.kl + self.ku;
        let mut ju = 0usize;
        for j in 0..n {
            let km = self.kl.min(n - 1 - j);
            let col = j * self.ld + kv;
            let mut jp = 0;
            let mut best = self.ab[col].norm_sqr();
            for r in 1..=km {
                let v = self.ab[col + r].norm_sqr();
                if v > best {
                    best = v;
                    jp = r;
                }
            }
            self.piv[j] = j + jp;
            if best == 0.0 {
                return Err(Error::Solver { residual: f64::INFINITY });
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = self.idx(j, c);
                    let b = self.idx(j + jp, c);
                    self.ab.swap(a, b);
                }
            }
            let pivot = self.ab[col];
            let inv = pivot.inv();
            for r in 1..=km {
                self.ab[col + r] *= inv;
            }
            for c in j + 1..=ju {
                let t = self.ab[self.idx(j, c)];
                if t == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let base_c = self.idx(j + 1, c);
                for r in 0..km {
                    let l = self.ab[col + 1 + r];
                    self.ab[base_c + r] -= l * t;
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [Complex64]) {
        let n = self.n;
        let kv = self.kl + self.ku;
        for j in 0..n {
            let km = self.kl.min(n - 1 - j);
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != Complex64::new(0.0, 0.0) {
                let col = j * self.ld + kv;
                for r in 1..=km {
                    b[j + r] -= self.ab[col + r] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.ab[j * self.ld + kv];
            let bj = b[j];
            if bj != Complex64::new(0.0, 0.0) {
                let top = j.saturating_sub(kv);
                for i in top..j {
                    b[i] -= self.ab[self.idx(i, j)] * bj;
                }
            }
        }
    }
}

/// Solution together with its achieved relative residual.
#[derive(Clone, Debug)]
pub struct Solution {
    pub u: Vec<Complex64>,
    pub residual: f64,
}

/// A factored operator that can be reused for many right-hand sides.
pub struct HelmholtzSolver {
    op: HelmholtzOperator,
    lu: BandLu,
}

impl HelmholtzSolver {
    pub fn new(op: HelmholtzOperator) -> Result<Self> {
        let mut lu = op.band();
        lu.factor()?;
        Ok(HelmholtzSolver { op, lu })
    }

    pub fn operator(&self) -> &HelmholtzOperator {
        &self.op
    }

    pub fn solve(&self, f: &[Complex64]) -> Result<Solution> {
        if f.len() != self.op.size() {
            return Err(Error::shape("helmholtz_solve", &[self.op.size()], &[f.len()]));
        }
        let mut u = f.to_vec();
        self.lu.solve(&mut u);
        let mut residual = self.op.relative_residual(&u, f);
        for _ in 0..5 {
            if residual < RESIDUAL_TOL * 1e-2 {
                break;
            }
            let au = self.op.apply(&u);
            let mut r: Vec<Complex64> = f.iter().zip(&au).map(|(a, b)| a - b).collect();
            self.lu.solve(&mut r);
            for (ui, ri) in u.iter_mut().zip(&r) {
                *ui += ri;
            }
            residual = self.op.relative_residual(&u, f);
        }
        if !(residual < RESIDUAL_TOL) {
            return Err(Error::Solver { residual });
        }
        Ok(Solution { u, residual })
    }
}

/// `f = (1 - n) k0^2 u_i`, pixelwise.
pub fn scattering_source(n: &GridField, ui: &GridField, k0: f64) -> Vec<Complex64> {
    n.data()
        .iter()
        .enumerate()
        .map(|(p, &m)| Complex64::new(ui.data()[2 * p], ui.data()[2 * p + 1]) * ((1.0 - m) * k0 * k0))
        .collect()
}

/// Scattered field for refractive multiplier `n` (1 channel) and incident
/// field `ui` (2 channels) on a grid of spacing `h`.
pub fn helmholtz_solve(n: &GridField, ui: &GridField, k0: f64, h: f64) -> Result<(GridField, f64)> {
    let res = n.resolution();
    if ui.resolution() != res || ui.channels() != 2 || n.channels() != 1 {
        return Err(Error::shape("helmholtz_solve", &[res, 1], &[ui.resolution(), ui.channels()]));
    }
    let lambda = std::f64::consts::TAU / k0;
    if h > lambda / 10.0 {
        log::warn!("grid spacing {h:.4} exceeds a tenth of the wavelength {lambda:.4}");
    }
    let f = scattering_source(n, ui, k0);
    let solver = HelmholtzSolver::new(HelmholtzOperator::new(n.data(), res, h, k0)?)?;
    let sol = solver.solve(&f)?;
    let us = crate::datagen::incident::complex_field(res, |x, y| sol.u[y * res + x]);
    Ok((us, sol.residual))
}
