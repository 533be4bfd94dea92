use std::sync::Arc;

use nfmm_core::autodiff::{gelu, gelu_grad, rope_rotate, Tape, Var, PAD};
use nfmm_core::gradcheck::{numeric_gradient, rel_err};
use nfmm_core::tensor::Tensor;
use nfmm_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d(sum(f(x) * w))/dx for a fixed random weighting `w`.
fn check_unary(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = f(&mut t, v).unwrap();
        random(&mut rng, t.shape(y))
    };
    let run = |t: &mut Tape, v: Var| -> Result<Var> {
        let y = f(t, v)?;
        let w = t.constant(&probe);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    };
    let mut tape = Tape::new();
    let v = tape.variable(x);
    let loss = run(&mut tape, v).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(v).unwrap();
    let numeric = numeric_gradient(x.data(), 1e-5, |d| {
        let mut t = Tape::new();
        let v = t.constant(&Tensor::new(x.shape().to_vec(), d.to_vec())?);
        let l = run(&mut t, v)?;
        Ok(t.value(l)[0])
    })
    .unwrap();
    analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n, 1e-8)).fold(0.0, f64::max)
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[5, 4]);
    let b = random(&mut rng, &[4, 3]);
    let bias = random(&mut rng, &[4]);
    let bias3 = random(&mut rng, &[3]);
    let other = random(&mut rng, &[5, 4]);
    let positive = Tensor::new(vec![5, 4], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let idx: Arc<[usize]> = vec![4, 0, 0, PAD, 2].into();
    let pos: Arc<[i64]> = vec![0, 3, -7, 12, 40].into();
    type Case<'a> = (&'a str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>);
    let cases: Vec<Case> = vec![
        ("matmul", x.clone(), Box::new(|t, v| {
            let c = t.constant(&b);
            t.matmul(v, c)
        })),
        ("matmul rhs", b.clone(), Box::new(|t, v| {
            let c = t.constant(&x);
            t.matmul(c, v)
        })),
        ("add", x.clone(), Box::new(|t, v| {
            let c = t.constant(&other);
            t.add(v, c)
        })),
        ("sub", x.clone(), Box::new(|t, v| {
            let c = t.constant(&other);
            t.sub(c, v)
        })),
        ("mul", x.clone(), Box::new(|t, v| {
            let c = t.constant(&other);
            t.mul(v, c)
        })),
        ("mul self", x.clone(), Box::new(|t, v| t.mul(v, v))),
        ("scale", x.clone(), Box::new(|t, v| Ok(t.scale(v, -2.5)))),
        ("add_scalar", x.clone(), Box::new(|t, v| Ok(t.add_scalar(v, 0.3)))),
        ("add_bias", bias.clone(), Box::new(|t, v| {
            let c = t.constant(&x);
            t.add_bias(c, v)
        })),
        ("affine x", x.clone(), Box::new(|t, v| {
            let (w, c) = (t.constant(&b), t.constant(&bias3));
            t.affine(v, w, c)
        })),
        ("affine w", b.clone(), Box::new(|t, v| {
            let (a, c) = (t.constant(&x), t.constant(&bias3));
            t.affine(a, v, c)
        })),
        ("affine b", bias3.clone(), Box::new(|t, v| {
            let (a, w) = (t.constant(&x), t.constant(&b));
            t.affine(a, w, v)
        })),
        ("gelu", x.clone(), Box::new(|t, v| Ok(t.gelu(v)))),
        ("sqrt", positive.clone(), Box::new(|t, v| Ok(t.sqrt(v)))),
        ("powf", positive.clone(), Box::new(|t, v| Ok(t.powf(v, 1.7)))),
        ("abs", positive.clone(), Box::new(|t, v| Ok(t.abs(v)))),
        ("gather", x.clone(), Box::new(|t, v| t.gather_rows(v, idx.clone()))),
        ("scatter src", x.clone(), Box::new(|t, v| {
            let d = t.constant(&Tensor::zeros(&[3, 4]));
            t.scatter_add(d, vec![2, 0, 2, 1, 1].into(), v)
        })),
        ("scatter dst", x.clone(), Box::new(|t, v| {
            let s = t.constant(&Tensor::zeros(&[2, 4]));
            t.scatter_add(v, vec![3, 3].into(), s)
        })),
        ("rope", x.clone(), Box::new(|t, v| t.rope(v, pos.clone(), 100.0))),
        ("reshape", x.clone(), Box::new(|t, v| t.reshape(v, vec![2, 10]))),
        ("sum", x.clone(), Box::new(|t, v| Ok(t.sum(v)))),
    ];
    for (name, input, f) in &cases {
        let e = check_unary(input, f.as_ref());
        assert!(e < 1e-4, "{name}: {e:e}");
    }
}

#[test]
fn gelu_derivative_at_reference_points() {
    for x in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        let h = 1e-5;
        let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!(rel_err(gelu_grad(x), numeric, 1e-8) < 1e-5, "x = {x}");
    }
}

#[test]
fn matmul_sum_gradient_is_column_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut t = Tape::new();
    let va = t.variable(&a);
    let vb = t.constant(&b);
    let c = t.matmul(va, vb).unwrap();
    let s = t.sum(c);
    t.backward(s).unwrap();
    let g = t.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let col: f64 = b.row(k).iter().sum();
            assert!((g[i * 4 + k] - col).abs() < 1e-14);
        }
    }
}

#[test]
fn two_layer_mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[6, 3]);
    let w1 = random(&mut rng, &[3, 5]);
    let w2 = random(&mut rng, &[5, 2]);
    let b1 = random(&mut rng, &[5]);
    let loss = |t: &mut Tape, w: Var| -> Result<Var> {
        let vx = t.constant(&x);
        let vb = t.constant(&b1);
        let v2 = t.constant(&w2);
        let h = t.matmul(vx, w)?;
        let h = t.add_bias(h, vb)?;
        let h = t.gelu(h);
        let y = t.matmul(h, v2)?;
        let y2 = t.mul(y, y)?;
        Ok(t.sum(y2))
    };
    let mut t = Tape::new();
    let vw = t.variable(&w1);
    let l = loss(&mut t, vw).unwrap();
    t.backward(l).unwrap();
    let analytic = t.grad(vw).unwrap();
    let numeric = numeric_gradient(w1.data(), 1e-5, |d| {
        let mut t = Tape::new();
        let v = t.constant(&Tensor::new(vec![3, 5], d.to_vec())?);
        let l = loss(&mut t, v)?;
        Ok(t.value(l)[0])
    })
    .unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_err(*a, *n, 1e-8) < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_then_scatter_restores_selected_rows(seed in any::<u64>(), picks in proptest::collection::btree_set(0usize..12, 0..12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[12, 3]);
        let idx: Arc<[usize]> = picks.iter().copied().collect::<Vec<_>>().into();
        let mut t = Tape::new();
        let v = t.constant(&x);
        let g = t.gather_rows(v, idx.clone()).unwrap();
        let z = t.constant(&Tensor::zeros(&[12, 3]));
        let s = t.scatter_add(z, idx, g).unwrap();
        let out = t.value(s);
        for r in 0..12 {
            let want: &[f64] = if picks.contains(&r) { x.row(r) } else { &[0.0; 3] };
            prop_assert_eq!(&out[r * 3..r * 3 + 3], want);
        }
    }

    #[test]
    fn shared_subexpressions_sum_their_gradients(a in -2.0..2.0f64, b in -2.0..2.0f64) {
        // loss = x*x + 3x with x used on both branches.
        let mut t = Tape::new();
        let x = t.variable(&Tensor::new(vec![2], vec![a, b]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0);
        let both = t.add(sq, lin).unwrap();
        let l = t.sum(both);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        prop_assert!((g[0] - (2.0 * a + 3.0)).abs() < 1e-14);
        prop_assert!((g[1] - (2.0 * b + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn rope_is_an_isometry(seed in any::<u64>(), pos in -5000i64..5000, half in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * half).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = rope_rotate(&v, pos, 10000.0).unwrap();
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((n(&r) - n(&v)).abs() < 1e-12);
    }

    #[test]
    fn rope_angles_add(seed in any::<u64>(), a in -3000i64..3000, b in -3000i64..3000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let two = rope_rotate(&rope_rotate(&v, a, 10000.0).unwrap(), b, 10000.0).unwrap();
        let one = rope_rotate(&v, a + b, 10000.0).unwrap();
        for (x, y) in two.iter().zip(&one) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
