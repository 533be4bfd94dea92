//! Self-checks run by the `verify` subcommand: partition exactness, flow
//! equivalence with the linear FMM, gradients, locality, rotary encoding,
//! metric identities and solver validity.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{rope_rotate, Tape};
use crate::datagen::{helmholtz_solve, incident_field, rasterize_n, sample_ellipses, PhantomConfig, Regime, Source};
use crate::error::Result;
use crate::field::GridField;
use crate::gradcheck::check_param_grads;
use crate::metrics::{h1_seminorm, rel_h1, rel_lp, tape_rel_h1, H1Stencil};
use crate::model::{DeepNeuralFmm, ModelConfig, RopeMode};
use crate::oracle::{direct_sum, linear_fmm_apply, Kernel, LinearOperators, PointSystem};
use crate::quadtree::{
    build_geometry, build_interaction_tables, morton_decode, morton_encode, partition_violations, InteractionTables,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Drops one interaction from the depth-3 tables before the partition
    /// check, which must then fail.
    pub corrupt_tables: bool,
}

pub const DEPTHS: [usize; 3] = [2, 3, 4];

fn tables(depth: usize) -> Result<InteractionTables> {
    Ok(build_interaction_tables(&build_geometry(depth, 1.0)?))
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Single-block, single-layer operators of width `w`, so every operator
/// can be frozen to a matrix.
pub fn linear_config(depth: usize, w: usize) -> ModelConfig {
    ModelConfig {
        in_channels: w,
        out_channels: w,
        hidden_width: w,
        latent: w,
        tree_depth: depth,
        operator_depth: 0,
        model_layers: 1,
        rope: RopeMode::None,
        rope_base: 10000.0,
    }
}

fn partition(opts: VerifyOptions) -> Result<(bool, String)> {
    let mut total = 0;
    for depth in DEPTHS {
        let mut t = tables(depth)?;
        if opts.corrupt_tables && depth == 3 {
            let target = 27;
            let source = t.level(3).interactions[target][0];
            t.remove_interaction(3, target, source);
        }
        total += partition_violations(&t).len();
    }
    Ok((total == 0, format!("{total} uncovered or doubly covered leaf pairs")))
}

fn flow_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for depth in DEPTHS {
        let w = 3;
        let (model, mut params) = DeepNeuralFmm::new(&linear_config(depth, w), 5)?;
        let ops = LinearOperators {
            ofs: random(&mut rng, w, w),
            ofo_ifi: (2..depth).map(|_| random(&mut rng, w, w)).collect(),
            ifo: (2..=depth).map(|_| random(&mut rng, w, w)).collect(),
            tfi: random(&mut rng, w, w),
        };
        let block = &model.blocks[0];
        block.freeze_linear(&mut params, &ops)?;
        let t = tables(depth)?;
        let v = random(&mut rng, 1 << (2 * depth), w);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(&v);
        let far = block.far_field(&mut tape, &vars, &t, x)?;
        let rows: Vec<Vec<f64>> = (0..v.rows()).map(|r| v.row(r).to_vec()).collect();
        let oracle = linear_fmm_apply(&rows, &t, &ops, &|_, _| 0.0)?;
        let got = tape.tensor(far);
        for (r, o) in oracle.far.iter().enumerate() {
            for (a, b) in got.row(r).iter().zip(o) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst < 1e-10, format!("max abs difference {worst:.3e}")))
}

fn counting() -> Result<(bool, String)> {
    let mut ok = true;
    for depth in DEPTHS {
        let (model, mut params) = DeepNeuralFmm::new(&linear_config(depth, 1), 5)?;
        let block = &model.blocks[0];
        block.freeze_linear(&mut params, &LinearOperators::counting(depth))?;
        let (nw, nb) = block.near.layers[0];
        let mut weights = [1.0; 9];
        weights[4] = 0.0;
        params.get_mut(nw).data_mut().copy_from_slice(&weights);
        params.get_mut(nb).data_mut()[0] = 0.0;
        let t = tables(depth)?;
        let n = 1usize << (2 * depth);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(&Tensor::new(vec![n, 1], vec![1.0; n])?);
        let k = block.kernel(&mut tape, &vars, &t, x)?;
        let side = 1usize << depth;
        let points = (0..n)
            .map(|m| {
                let (px, py) = morton_decode(m as u64);
                [px as f64 / side as f64, py as f64 / side as f64]
            })
            .collect();
        let sys = PointSystem::new(points, vec![Complex64::new(1.0, 0.0); n], Kernel::Constant)?;
        let direct = direct_sum(&sys);
        ok &= tape.value(k).iter().zip(&direct).all(|(a, d)| *a == d.re && d.im == 0.0);
    }
    Ok((ok, "block with counting operators equals the all-ones direct sum".into()))
}

fn model_gradients() -> Result<(bool, String)> {
    let depth = 4;
    let cfg = ModelConfig {
        in_channels: 1,
        out_channels: 2,
        hidden_width: 8,
        latent: 8,
        tree_depth: depth,
        operator_depth: 1,
        model_layers: 1,
        rope: RopeMode::Relative,
        rope_base: 10000.0,
    };
    let (model, mut params) = DeepNeuralFmm::new(&cfg, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    let t = tables(depth)?;
    let v = random(&mut rng, 256, 1);
    let target = random(&mut rng, 256, 2);
    let st = H1Stencil::morton(depth, 1.0 / 16.0);
    let run = |ps: &crate::params::ParamSet, grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape);
        let x = tape.constant(&v);
        let y = model.forward(&mut tape, &vars, &t, x)?;
        let loss = tape_rel_h1(&mut tape, y, &target, &st)?;
        let value = tape.value(loss)[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, ps.grads_from_tape(&tape)))
    };
    let (_, analytic) = run(&params, true)?;
    let r = check_param_grads(&params, &analytic, 1e-5, 1e-6, 11, |ps| Ok(run(ps, false)?.0))?;
    Ok((
        r.max_rel_err < 1e-4,
        format!("{} entries, max relative error {:.3e}", r.checked, r.max_rel_err),
    ))
}

fn locality() -> Result<(bool, String)> {
    let depth = 4;
    let w = 4;
    let mut cfg = linear_config(depth, w);
    cfg.operator_depth = 1;
    cfg.rope = RopeMode::Relative;
    let (model, params) = DeepNeuralFmm::new(&cfg, 2)?;
    let block = &model.blocks[0];
    let t = tables(depth)?;
    let (sx, sy) = (2u32, 3u32);
    let src = morton_encode(sx, sy, depth as u32)? as usize;
    let n = 1 << (2 * depth);
    let response = |near_only: bool| -> Result<Vec<f64>> {
        let run = |v: &Tensor| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(v);
            let y = if near_only {
                block.near_field(&mut tape, &vars, &t, x)?
            } else {
                block.forward(&mut tape, &vars, &t, x)?
            };
            Ok(tape.value(y).to_vec())
        };
        let mut imp = Tensor::zeros(&[n, w]);
        imp.data_mut()[src * w] = 1.0;
        let base = run(&Tensor::zeros(&[n, w]))?;
        Ok(run(&imp)?.iter().zip(&base).map(|(a, b)| a - b).collect())
    };
    let near = response(true)?;
    let full = response(false)?;
    let (mut leaks, mut far) = (0, 0);
    for m in 0..n {
        let (x, y) = morton_decode(m as u64);
        let dist = (x as i64 - sx as i64).abs().max((y as i64 - sy as i64).abs());
        if dist > 1 && near[m * w..(m + 1) * w].iter().any(|&v| v != 0.0) {
            leaks += 1;
        }
        if dist >= 8 && full[m * w..(m + 1) * w].iter().any(|&v| v != 0.0) {
            far += 1;
        }
    }
    Ok((
        leaks == 0 && far > 0,
        format!("near path reaches {leaks} cells outside 3x3; block reaches {far} cells at distance >= 8"),
    ))
}

fn rope() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut norm_err, mut add_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let m = 2 * rng.gen_range(1..32);
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (rng.gen_range(-3000..3000), rng.gen_range(-3000..3000));
        let r = rope_rotate(&v, a, 10000.0)?;
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm_err = norm_err.max((n0 - n1).abs());
        let ab = rope_rotate(&r, b, 10000.0)?;
        let direct = rope_rotate(&v, a + b, 10000.0)?;
        add_err = add_err.max(ab.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    Ok((
        norm_err < 1e-12 && add_err < 1e-10,
        format!("norm error {norm_err:.2e}, additivity error {add_err:.2e}"),
    ))
}

fn metric_identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = GridField::new(32, 2, (0..32 * 32 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let doubled = GridField::new(32, 2, u.data().iter().map(|v| 2.0 * v).collect())?;
    let dx = 1.0 / 32.0;
    let exact = rel_lp(&doubled, &u, 2.0)? == 1.0 && rel_lp(&doubled, &u, 1.0)? == 1.0 && rel_h1(&doubled, &u, dx)? == 1.0;
    let zero = rel_lp(&u, &u, 2.0)? == 0.0 && rel_h1(&u, &u, dx)? == 0.0;
    let n = 256;
    let s = GridField::from_fn(n, 1, |x, _, _| (std::f64::consts::TAU * (x as f64 + 0.5) / n as f64).sin());
    let semi = h1_seminorm(&s, 1.0 / n as f64);
    let analytic = std::f64::consts::PI * 2f64.sqrt();
    let rel = (semi - analytic).abs() / analytic;
    Ok((
        exact && zero && rel < 0.02,
        format!("doubling gives 1: {exact}; perfect gives 0: {zero}; sin semi-norm off by {:.2}%", 100.0 * rel),
    ))
}

fn solver() -> Result<(bool, String)> {
    let g = build_geometry(4, 3.0)?.with_origin([-1.5, -1.5]);
    let h = g.grid_spacing();
    let k0 = 4.0;
    let e = sample_ellipses(3, Regime::Transmission, &PhantomConfig::default(), 1)?;
    let n = rasterize_n(&e, &g);
    let ui = incident_field(&Source::Plane { angle: 0.4 }, k0, &g)?;
    let (us, residual) = helmholtz_solve(&n, &ui, k0, h)?;
    let flat = GridField::from_fn(16, 1, |_, _, _| 1.0);
    let (zero, _) = helmholtz_solve(&flat, &ui, k0, h)?;
    let alpha = Complex64::new(0.7, -1.2);
    let scaled = GridField::from_fn(16, 2, |x, y, c| {
        let z = alpha * Complex64::new(ui.get(x, y, 0), ui.get(x, y, 1));
        if c == 0 {
            z.re
        } else {
            z.im
        }
    });
    let (us2, _) = helmholtz_solve(&n, &scaled, k0, h)?;
    let mut lin: f64 = 0.0;
    for y in 0..16 {
        for x in 0..16 {
            let want = alpha * Complex64::new(us.get(x, y, 0), us.get(x, y, 1));
            lin = lin.max((Complex64::new(us2.get(x, y, 0), us2.get(x, y, 1)) - want).norm());
        }
    }
    let scale = us.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let zero_ok = zero.data().iter().all(|&v| v == 0.0);
    Ok((
        residual < 1e-8 && zero_ok && lin <= 1e-8 * scale.max(1.0),
        format!("residual {residual:.2e}; background gives zero: {zero_ok}; linearity error {lin:.2e}"),
    ))
}

/// Runs every check in order.
pub fn run_checks(opts: VerifyOptions) -> Vec<CheckResult> {
    type Check = (&'static str, Box<dyn Fn() -> Result<(bool, String)>>);
    let checks: Vec<Check> = vec![
        ("partition exactness", Box::new(move || partition(opts))),
        ("flow equivalence", Box::new(flow_equivalence)),
        ("counting operators", Box::new(counting)),
        ("model gradients", Box::new(model_gradients)),
        ("non-locality", Box::new(locality)),
        ("rotary encoding", Box::new(rope)),
        ("metric identities", Box::new(metric_identities)),
        ("solver validity", Box::new(solver)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult {
                name,
                passed,
                detail,
                elapsed: t0.elapsed(),
            }
        })
        .collect()
}
