//! Incident fields: plane waves and free-space point sources.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::quadtree::TreeGeometry;

/// Smallest admissible source-circle radius: the phantom ring is seeded on
/// the unit circle, so point sources must sit strictly outside it.
pub const MIN_SOURCE_RADIUS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Point,
    Plane,
}

impl SourceKind {
    pub fn code(self) -> u32 {
        match self {
            SourceKind::Point => 0,
            SourceKind::Plane => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(SourceKind::Point),
            1 => Some(SourceKind::Plane),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Source {
    /// Point source at `position`, which lies on a circle about the origin.
    Point { position: [f64; 2] },
    /// `exp(i k0 d . x)` with `d = (cos angle, sin angle)`.
    Plane { angle: f64 },
}

impl Source {
    pub fn kind(&self) -> SourceKind {
        match self {
            Source::Point { .. } => SourceKind::Point,
            Source::Plane { .. } => SourceKind::Plane,
        }
    }
}

/// `H0^(1)(x) = J0(x) + i Y0(x)` for `x > 0`.
pub fn hankel0(x: f64) -> Complex64 {
    Complex64::new(puruspe::Jn(0, x), puruspe::Yn(0, x))
}

/// Free-space Green's function `(i/4) H0^(1)(k0 r)` with `r` cut off at
/// `r_min` to keep the source pixel finite.
pub fn green(k0: f64, r: f64, r_min: f64) -> Complex64 {
    Complex64::new(0.0, 0.25) * hankel0(k0 * r.max(r_min))
}

/// Incident field as two channels (real, imaginary).
pub fn incident_field(source: &Source, k0: f64, g: &TreeGeometry) -> Result<GridField> {
    let n = g.resolution();
    let h = g.grid_spacing();
    match *source {
        Source::Plane { angle } => {
            let (s, c) = angle.sin_cos();
            Ok(complex_field(n, |x, y| {
                let p = g.pixel_center(x, y);
                Complex64::from_polar(1.0, k0 * (c * p[0] + s * p[1]))
            }))
        }
        Source::Point { position } => {
            let radius = position[0].hypot(position[1]);
            if radius <= MIN_SOURCE_RADIUS {
                return Err(Error::Config(format!(
                    "point source at radius {radius} lies inside the scatterer region (radius {MIN_SOURCE_RADIUS})"
                )));
            }
            Ok(complex_field(n, |x, y| {
                let p = g.pixel_center(x, y);
                green(k0, (p[0] - position[0]).hypot(p[1] - position[1]), 0.5 * h)
            }))
        }
    }
}

pub(crate) fn complex_field(n: usize, f: impl Fn(usize, usize) -> Complex64) -> GridField {
    let mut data = Vec::with_capacity(2 * n * n);
    for y in 0..n {
        for x in 0..n {
            let z = f(x, y);
            data.push(z.re);
            data.push(z.im);
        }
    }
    GridField::new(n, 2, data).expect("shape")
}

/// Distinct pixels hit by sampling the circle of `radius` about the
/// origin, in order of first appearance by angle. Returns `(x, y)` pixel
/// indices.
pub fn distinct_circle_pixels(g: &TreeGeometry, radius: f64) -> Vec<(usize, usize)> {
    let n = g.resolution();
    let h = g.grid_spacing();
    let samples = 64 * n;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for i in 0..samples {
        let ang = std::f64::consts::TAU * i as f64 / samples as f64;
        let px = ((radius * ang.cos() - g.origin[0]) / h).floor();
        let py = ((radius * ang.sin() - g.origin[1]) / h).floor();
        if px < 0.0 || py < 0.0 || px >= n as f64 || py >= n as f64 {
            continue;
        }
        let key = (px as usize, py as usize);
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}
