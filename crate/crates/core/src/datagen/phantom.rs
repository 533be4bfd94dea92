//! Elliptical scatterer phantoms.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::quadtree::TreeGeometry;
use crate::rng::{self, streams};

pub const AXIS_MIN: f64 = 0.25;
pub const AXIS_MAX: f64 = 2.5;
pub const MIN_ELLIPSES: usize = 2;
pub const MAX_ELLIPSES: usize = 10;

/// Scattering regime: the range of the refractive multiplier inside
/// scatterers, relative to a background of 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Weak,
    Transmission,
    Hard,
}

impl Regime {
    pub fn range(self) -> (f64, f64) {
        match self {
            Regime::Weak => (0.9, 1.1),
            Regime::Transmission => (1.0, 2.0),
            Regime::Hard => (2.0, 4.0),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Regime::Weak => 0,
            Regime::Transmission => 1,
            Regime::Hard => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Regime::Weak),
            1 => Some(Regime::Transmission),
            2 => Some(Regime::Hard),
            _ => None,
        }
    }
}

/// One ellipse. `a` and `b` are the semi-axes along the rotated x and y
/// directions; `value` is the refractive multiplier inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: [f64; 2],
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub value: f64,
}

impl EllipseParams {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Knobs of the phantom generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Factor applied to the major-axis draw of each subsequent ellipse.
    pub shrink: f64,
    /// Relative half-width of the multiplicative permutation.
    pub permute_width: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shrink: 0.9,
            permute_width: 0.1,
        }
    }
}

/// Vertices of a regular `count`-gon circumscribing the unit circle,
/// starting at angle `phase`, pulled radially into `[-1, 1]^2`.
pub fn polygon_vertices(count: usize, phase: f64) -> Vec<[f64; 2]> {
    let r = 1.0 / (PI / count as f64).cos();
    (0..count)
        .map(|j| {
            let ang = phase + TAU * j as f64 / count as f64;
            let (x, y) = (r * ang.cos(), r * ang.sin());
            let m = x.abs().max(y.abs()).max(1.0);
            [x / m, y / m]
        })
        .collect()
}

pub fn sample_ellipses(count: usize, regime: Regime, cfg: &PhantomConfig, seed: u64) -> Result<Vec<EllipseParams>> {
    if !(MIN_ELLIPSES..=MAX_ELLIPSES).contains(&count) {
        return Err(Error::Config(format!(
            "ellipse count must lie in [{MIN_ELLIPSES}, {MAX_ELLIPSES}], got {count}"
        )));
    }
    let mut r = rng::stream(seed, streams::PHANTOM);
    let phase = r.gen_range(0.0..TAU);
    let (lo, hi) = regime.range();
    let mut scale = 1.0;
    let out = polygon_vertices(count, phase)
        .into_iter()
        .map(|center| {
            let a = (r.gen_range(AXIS_MIN..=AXIS_MAX) * scale).clamp(AXIS_MIN, AXIS_MAX);
            let b = r.gen_range(AXIS_MIN..=a);
            let theta = r.gen_range(0.0..TAU);
            let value = r.gen_range(lo..=hi);
            scale *= cfg.shrink;
            EllipseParams {
                center,
                a,
                b,
                theta,
                value,
            }
        })
        .collect();
    Ok(out)
}

/// Multiplies centre, axes and angle by independent factors in
/// `[1 - w, 1 + w]`, then clamps back into the valid ranges.
pub fn permute_exemplar(e: &[EllipseParams], width: f64, seed: u64) -> Vec<EllipseParams> {
    let mut r = rng::stream(seed, streams::PERMUTE);
    let mut f = || r.gen_range(1.0 - width..=1.0 + width);
    e.iter()
        .map(|p| {
            let cx = (p.center[0] * f()).clamp(-1.0, 1.0);
            let cy = (p.center[1] * f()).clamp(-1.0, 1.0);
            let a = (p.a * f()).clamp(AXIS_MIN, AXIS_MAX);
            let b = (p.b * f()).clamp(AXIS_MIN, a);
            let theta = (p.theta * f()).rem_euclid(TAU);
            EllipseParams {
                center: [cx, cy],
                a,
                b,
                theta,
                value: p.value,
            }
        })
        .collect()
}

/// Refractive multiplier on the grid: background 1, later ellipses win on
/// overlap.
pub fn rasterize_n(ellipses: &[EllipseParams], g: &TreeGeometry) -> GridField {
    let n = g.resolution();
    GridField::from_fn(n, 1, |x, y, _| {
        let p = g.pixel_center(x, y);
        ellipses
            .iter()
            .rev()
            .find(|e| e.contains(p))
            .map_or(1.0, |e| e.value)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadtree::build_geometry;

    #[test]
    fn four_vertices_at_right_angles() {
        let v = polygon_vertices(4, 0.3);
        for j in 0..4 {
            let a0 = v[j][1].atan2(v[j][0]);
            let a1 = v[(j + 1) % 4][1].atan2(v[(j + 1) % 4][0]);
            let d = (a1 - a0).rem_euclid(TAU);
            assert!((d - PI / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn count_out_of_range() {
        let c = PhantomConfig::default();
        assert!(matches!(sample_ellipses(1, Regime::Weak, &c, 0), Err(Error::Config(_))));
        assert!(matches!(sample_ellipses(11, Regime::Weak, &c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let c = PhantomConfig::default();
        let a = sample_ellipses(5, Regime::Hard, &c, 3).unwrap();
        assert_eq!(a, sample_ellipses(5, Regime::Hard, &c, 3).unwrap());
        assert_ne!(a, sample_ellipses(5, Regime::Hard, &c, 4).unwrap());
    }

    #[test]
    fn zero_width_permutation_is_identity() {
        let e = sample_ellipses(6, Regime::Weak, &PhantomConfig::default(), 9).unwrap();
        assert_eq!(permute_exemplar(&e, 0.0, 1), e);
    }

    #[test]
    fn empty_phantom_is_background() {
        let g = build_geometry(3, 3.0).unwrap().with_origin([-1.5, -1.5]);
        assert!(rasterize_n(&[], &g).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn later_ellipse_wins() {
        let g = build_geometry(3, 3.0).unwrap().with_origin([-1.5, -1.5]);
        let e = |value| EllipseParams {
            center: [0.0, 0.0],
            a: 1.0,
            b: 0.5,
            theta: 0.0,
            value,
        };
        let n = rasterize_n(&[e(1.5), e(1.8)], &g);
        assert_eq!(n.get(4, 4, 0), 1.8);
        assert_eq!(n.get(0, 0, 0), 1.0);
    }
}
