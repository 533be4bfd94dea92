//! Direct N-body summation and a classical multi-level FMM pass with plain
//! matrix translation operators.
//!
//! This is the reference for the information flow the neural block executes:
//! sources are lifted into outgoing vectors at the leaves, merged up the
//! tree, translated across interaction lists, pushed down to the leaves and
//! expanded, with the leaf neighborhood evaluated directly.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::quadtree::{InteractionTables, MIN_DEPTH};
use crate::tensor::Tensor;

type KernelFn = dyn Fn([f64; 2], [f64; 2]) -> f64 + Send + Sync;

/// Pairwise interaction kernel `G(x, y)`.
#[derive(Clone)]
pub enum Kernel {
    /// `log |x - y|`
    Log,
    /// `exp(-|x - y|^2)`
    Gaussian,
    /// `1`
    Constant,
    Custom(Arc<KernelFn>),
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Log => write!(f, "Log"),
            Kernel::Gaussian => write!(f, "Gaussian"),
            Kernel::Constant => write!(f, "Constant"),
            Kernel::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Kernel {
    pub fn eval(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        match self {
            Kernel::Log => 0.5 * d2.ln(),
            Kernel::Gaussian => (-d2).exp(),
            Kernel::Constant => 1.0,
            Kernel::Custom(f) => f(x, y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointSystem {
    points: Vec<[f64; 2]>,
    sources: Vec<Complex64>,
    kernel: Kernel,
}

impl PointSystem {
    pub fn new(points: Vec<[f64; 2]>, sources: Vec<Complex64>, kernel: Kernel) -> Result<Self> {
        if points.len() != sources.len() {
            return Err(Error::shape("point_system", &[points.len()], &[sources.len()]));
        }
        Ok(PointSystem {
            points,
            sources,
            kernel,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn sources(&self) -> &[Complex64] {
        &self.sources
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
}

/// `u(x_i) = sum_{j != i} G(x_i, x_j) phi_j`.
pub fn direct_sum(sys: &PointSystem) -> Vec<Complex64> {
    let pts = &sys.points;
    pts.iter()
        .enumerate()
        .map(|(i, &xi)| {
            pts.iter()
                .zip(&sys.sources)
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, (&xj, phi))| phi * sys.kernel.eval(xi, xj))
                .sum()
        })
        .collect()
}

/// Matrix translation operators. Matrices act on column vectors.
///
/// * `ofs`: `m x c`, source to outgoing at the leaves
/// * `ofo_ifi[l - 2]`, `l` in `2..L`: `m x m`, shared by the child-to-parent
///   merge into level `l` and the parent-to-child shift into level `l + 1`
/// * `ifo[k - 2]`, `k` in `2..=L`: `m x m`, outgoing to incoming at level `k`
/// * `tfi`: `c_out x m`, incoming to potential at the leaves
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperators {
    pub ofs: Tensor,
    pub ofo_ifi: Vec<Tensor>,
    pub ifo: Vec<Tensor>,
    pub tfi: Tensor,
}

fn ones(r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], vec![1.0; r * c]).expect("shape")
}

impl LinearOperators {
    /// Scalar all-ones operators: each delivered interaction adds the raw
    /// source value.
    pub fn counting(depth: usize) -> Self {
        LinearOperators {
            ofs: ones(1, 1),
            ofo_ifi: (MIN_DEPTH..depth).map(|_| ones(1, 1)).collect(),
            ifo: (MIN_DEPTH..=depth).map(|_| ones(1, 1)).collect(),
            tfi: ones(1, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.ofs.rows()
    }

    fn validate(&self, depth: usize, channels: usize) -> Result<()> {
        let m = self.ofs.rows();
        let expect = |t: &Tensor, r: usize, c: usize| {
            if t.shape() == [r, c] {
                Ok(())
            } else {
                Err(Error::shape("linear_fmm_apply", t.shape(), &[r, c]))
            }
        };
        expect(&self.ofs, m, channels)?;
        if self.ofo_ifi.len() != depth.saturating_sub(MIN_DEPTH)
            || self.ifo.len() != depth + 1 - MIN_DEPTH
        {
            return Err(Error::Config(format!(
                "depth {depth} needs {} shared and {} translation operators, got {} and {}",
                depth.saturating_sub(MIN_DEPTH),
                depth + 1 - MIN_DEPTH,
                self.ofo_ifi.len(),
                self.ifo.len()
            )));
        }
        for t in self.ofo_ifi.iter().chain(&self.ifo) {
            expect(t, m, m)?;
        }
        if self.tfi.cols() != m || self.tfi.shape().len() != 2 {
            return Err(Error::shape("linear_fmm_apply", self.tfi.shape(), &[0, m]));
        }
        Ok(())
    }
}

fn matvec_add(mat: &Tensor, x: &[f64], out: &mut [f64]) {
    let c = mat.cols();
    for (r, o) in out.iter_mut().enumerate() {
        *o += mat.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        debug_assert_eq!(c, x.len());
    }
}

/// Per-leaf potentials of a linear FMM pass, split by origin.
#[derive(Clone, Debug, PartialEq)]
pub struct FmmPotentials {
    pub far: Vec<Vec<f64>>,
    pub near: Vec<Vec<f64>>,
}

impl FmmPotentials {
    pub fn total(&self) -> Vec<Vec<f64>> {
        self.far
            .iter()
            .zip(&self.near)
            .map(|(f, n)| f.iter().zip(n).map(|(a, b)| a + b).collect())
            .collect()
    }
}

/// Runs the upward, downward and leaf passes over grid-aligned sources,
/// one source vector per leaf in Morton order. `near(t, s)` is the direct
/// kernel weight between distinct neighboring leaves.
pub fn linear_fmm_apply(
    sources: &[Vec<f64>],
    tables: &InteractionTables,
    ops: &LinearOperators,
    near: &dyn Fn(usize, usize) -> f64,
) -> Result<FmmPotentials> {
    let depth = tables.depth;
    let leaves = 1usize << (2 * depth);
    if sources.len() != leaves {
        return Err(Error::shape("linear_fmm_apply", &[sources.len()], &[leaves]));
    }
    let c = sources.first().map_or(0, Vec::len);
    if let Some(bad) = sources.iter().find(|s| s.len() != c) {
        return Err(Error::shape("linear_fmm_apply", &[c], &[bad.len()]));
    }
    ops.validate(depth, c)?;
    let m = ops.width();
    let c_out = ops.tfi.rows();

    // Upward pass.
    let mut q: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth + 1];
    q[depth] = sources
        .iter()
        .map(|phi| {
            let mut v = vec![0.0; m];
            matvec_add(&ops.ofs, phi, &mut v);
            v
        })
        .collect();
    for l in (MIN_DEPTH..depth).rev() {
        let op = &ops.ofo_ifi[l - MIN_DEPTH];
        let mut level = vec![vec![0.0; m]; 1 << (2 * l)];
        for (child, qc) in q[l + 1].iter().enumerate() {
            matvec_add(op, qc, &mut level[child >> 2]);
        }
        q[l] = level;
    }

    // Downward pass; level 2 has no parent contribution.
    let mut h: Vec<Vec<f64>> = Vec::new();
    for k in MIN_DEPTH..=depth {
        let lt = tables.level(k);
        let translate = &ops.ifo[k - MIN_DEPTH];
        let mut level = vec![vec![0.0; m]; lt.box_count()];
        for (tau, hv) in level.iter_mut().enumerate() {
            if k > MIN_DEPTH {
                matvec_add(&ops.ofo_ifi[k - 1 - MIN_DEPTH], &h[tau >> 2], hv);
            }
            for &sigma in &lt.interactions[tau] {
                matvec_add(translate, &q[k][sigma], hv);
            }
        }
        h = level;
    }

    // Leaf pass.
    let far = h
        .iter()
        .map(|hv| {
            let mut v = vec![0.0; c_out];
            matvec_add(&ops.tfi, hv, &mut v);
            v
        })
        .collect();
    let leaf_nb = &tables.level(depth).neighbors;
    let near_pot = (0..leaves)
        .map(|t| {
            let mut v = vec![0.0; c];
            for &s in &leaf_nb[t] {
                if s == t {
                    continue;
                }
                let w = near(t, s);
                for (o, x) in v.iter_mut().zip(&sources[s]) {
                    *o += w * x;
                }
            }
            v
        })
        .collect();
    Ok(FmmPotentials {
        far,
        near: near_pot,
    })
}
