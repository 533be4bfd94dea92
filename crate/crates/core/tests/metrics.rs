use nfmm_core::autodiff::Tape;
use nfmm_core::field::GridField;
use nfmm_core::gradcheck::{numeric_gradient, rel_err};
use nfmm_core::metrics::{h1, h1_norm, h1_seminorm, l_inf, rel_h1, rel_h1_loss, rel_lp, tape_rel_h1, H1Stencil};
use nfmm_core::quadtree::{build_geometry, grid_to_leaves};
use nfmm_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(n: usize, c: usize, seed: u64) -> GridField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GridField::new(n, c, (0..n * n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// Independent brute force: planes as nested vectors, every derivative
// spelled out explicitly.
fn brute_h1(d: &GridField, dx: f64) -> f64 {
    let n = d.resolution();
    let mut total = 0.0;
    for c in 0..d.channels() {
        let g: Vec<Vec<f64>> = (0..n).map(|y| (0..n).map(|x| d.get(x, y, c)).collect()).collect();
        for y in 0..n {
            for x in 0..n {
                let ddx = if x == 0 {
                    (g[y][1] - g[y][0]) / dx
                } else if x == n - 1 {
                    (g[y][n - 1] - g[y][n - 2]) / dx
                } else {
                    (g[y][x + 1] - g[y][x - 1]) / (2.0 * dx)
                };
                let ddy = if y == 0 {
                    (g[1][x] - g[0][x]) / dx
                } else if y == n - 1 {
                    (g[n - 1][x] - g[n - 2][x]) / dx
                } else {
                    (g[y + 1][x] - g[y - 1][x]) / (2.0 * dx)
                };
                total += (g[y][x] * g[y][x] + ddx * ddx + ddy * ddy) * dx * dx;
            }
        }
    }
    total.sqrt()
}

fn brute_rel_lp(v: &GridField, u: &GridField, p: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..v.data().len() {
        num += (v.data()[i] - u.data()[i]).abs().powf(p);
        den += u.data()[i].abs().powf(p);
    }
    (num / den).powf(1.0 / p)
}

fn sub(v: &GridField, u: &GridField) -> GridField {
    GridField::new(v.resolution(), v.channels(), v.data().iter().zip(u.data()).map(|(a, b)| a - b).collect()).unwrap()
}

#[test]
fn metrics_match_brute_force() {
    for seed in 0..5 {
        let v = random_field(16, 2, seed);
        let u = random_field(16, 2, seed + 100);
        for p in [1.0, 2.0, 3.5] {
            assert!((rel_lp(&v, &u, p).unwrap() - brute_rel_lp(&v, &u, p)).abs() < 1e-12);
        }
        let dx = 3.0 / 16.0;
        assert!((h1_norm(&v, &u, dx).unwrap() - brute_h1(&sub(&v, &u), dx)).abs() < 1e-12);
        let want = brute_h1(&sub(&v, &u), dx) / brute_h1(&u, dx);
        assert!((rel_h1(&v, &u, dx).unwrap() - want).abs() < 1e-12);
        let mut m: f64 = 0.0;
        for (a, b) in v.data().iter().zip(u.data()) {
            m = m.max((a - b).abs());
        }
        assert_eq!(l_inf(&v, &u).unwrap(), m);
    }
}

#[test]
fn sine_seminorm_matches_integral() {
    let n = 64;
    let dx = 1.0 / n as f64;
    let d = GridField::from_fn(n, 1, |x, _, _| (2.0 * std::f64::consts::PI * (x as f64 + 0.5) * dx).sin());
    // ||2 pi cos(2 pi x)|| over the unit square.
    let exact = std::f64::consts::PI * 2f64.sqrt();
    let got = h1_seminorm(&d, dx);
    assert!((got - exact).abs() / exact < 0.02, "{got} vs {exact}");
}

#[test]
fn rel_h1_batch_of_doubles_is_one() {
    let us: Vec<_> = (0..3).map(|s| random_field(8, 2, s)).collect();
    let vs: Vec<_> = us
        .iter()
        .map(|u| GridField::new(8, 2, u.data().iter().map(|a| 2.0 * a).collect()).unwrap())
        .collect();
    assert_eq!(rel_h1_loss(&vs, &us, 0.1).unwrap(), 1.0);
}

#[test]
fn rel_h1_gradient_matches_finite_differences() {
    let depth = 3;
    let dx = 3.0 / 8.0;
    let g = build_geometry(depth, 3.0).unwrap();
    let st = H1Stencil::morton(depth, dx);
    let u = grid_to_leaves(&random_field(8, 2, 1), &g).unwrap();
    let v = grid_to_leaves(&random_field(8, 2, 2), &g).unwrap();
    let mut tape = Tape::new();
    let pv = tape.variable(&v);
    let loss = tape_rel_h1(&mut tape, pv, &u, &st).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(pv).unwrap();
    let numeric = numeric_gradient(v.data(), 1e-5, |x| {
        let mut t = Tape::new();
        let p = t.constant(&Tensor::new(v.shape().to_vec(), x.to_vec()).unwrap());
        let l = tape_rel_h1(&mut t, p, &u, &st)?;
        Ok(t.value(l)[0])
    })
    .unwrap();
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n, 1e-8))
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst:e}");
}

fn field_strategy() -> impl Strategy<Value = (GridField, GridField, GridField)> {
    (any::<u64>()).prop_map(|s| (random_field(6, 2, s), random_field(6, 2, s ^ 1), random_field(6, 2, s ^ 2)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rel_metrics_are_scale_invariant((v, u, _) in field_strategy(), c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
        let scale = |f: &GridField| GridField::new(6, 2, f.data().iter().map(|a| a * c).collect()).unwrap();
        let (cv, cu) = (scale(&v), scale(&u));
        for p in [1.0, 2.0] {
            prop_assert!((rel_lp(&cv, &cu, p).unwrap() - rel_lp(&v, &u, p).unwrap()).abs() < 1e-12);
        }
        prop_assert!((rel_h1(&cv, &cu, 0.5).unwrap() - rel_h1(&v, &u, 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn norms_satisfy_triangle_inequality((a, b, c) in field_strategy()) {
        let tol = 1e-12;
        let l2 = |x: &GridField, y: &GridField| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(l2(&a, &c) <= l2(&a, &b) + l2(&b, &c) + tol);
        prop_assert!(h1_norm(&a, &c, 0.3).unwrap() <= h1_norm(&a, &b, 0.3).unwrap() + h1_norm(&b, &c, 0.3).unwrap() + tol);
        prop_assert!(l_inf(&a, &c).unwrap() <= l_inf(&a, &b).unwrap() + l_inf(&b, &c).unwrap() + tol);
    }

    #[test]
    fn max_dominates_rms((v, u, _) in field_strategy()) {
        let n = v.data().len() as f64;
        let rms = (v.data().iter().zip(u.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(l_inf(&v, &u).unwrap() + 1e-15 >= rms);
    }

    #[test]
    fn norms_are_nonnegative((v, u, _) in field_strategy()) {
        prop_assert!(h1(&v, 0.2) >= 0.0);
        prop_assert!(rel_h1(&v, &u, 0.2).unwrap() >= 0.0);
        prop_assert!(rel_lp(&v, &u, 1.0).unwrap() >= 0.0);
    }
}
