//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (one buffer per parameter) against central
/// differences of `value` with step `h`. `stride` > 1 checks every
/// `stride`-th entry of each parameter.
pub fn check_param_grads(
    params: &ParamSet,
    analytic: &[Vec<f64>],
    h: f64,
    floor: f64,
    stride: usize,
    value: impl Fn(&ParamSet) -> Result<f64>,
) -> Result<GradCheck> {
    let mut probe = params.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    for id in 0..params.len() {
        for i in (0..params.get(id).numel()).step_by(stride.max(1)) {
            let x0 = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + h;
            let fp = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - h;
            let fm = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id][i];
            let e = rel_err(a, numeric, floor);
            out.checked += 1;
            out.max_abs_err = out.max_abs_err.max((a - numeric).abs());
            if e >= out.max_rel_err {
                out.max_rel_err = e;
                out.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient of a function of a plain vector.
pub fn numeric_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}
