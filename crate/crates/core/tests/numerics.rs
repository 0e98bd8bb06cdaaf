use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uda_core::numerics::{finite_diff_check, finite_diff_gradients, FdComparison, Graph, NumericsError, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks are never straddled by the stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = random(shape, -1.0, 1.0, rng);
    t.map(|v| v.signum() * (0.05 + v.abs()))
}

/// Distinct values at least 0.01 apart, so pooling windows have no near-ties.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduce to a scalar through fixed random weights so gradients are not uniform.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(g.shape(y), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[5]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn clamp_lifts_zero_to_lower_bound() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.clamp(x, 1e-7, 1.0).unwrap();
    assert_eq!(g.value(y).item().unwrap(), 1e-7);
}

#[test]
fn identity_kernel_convolution_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random(&[2, 5, 7, 3], 0.0, 1.0, &mut rng);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let w = g.constant(w);
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &img);
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, h, wd, ci, co, k, s, p) = (2, 7, 6, 3, 4, 4, 2, 1);
    let x = random(&[n, h, wd, ci], -1.0, 1.0, &mut rng);
    let w = random(&[k, k, ci, co], -1.0, 1.0, &mut rng);
    let b = random(&[co], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, s, p).unwrap();
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
    assert_eq!(g.shape(y), &[n, oh, ow, co]);
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = b.data()[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..ci {
                                let xi = ((bi * h + iy as usize) * wd + ix as usize) * ci + c;
                                let wi = ((ky * k + kx) * ci + c) * co + o;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    let got = g.value(y).data()[((bi * oh + oy) * ow + ox) * co + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.3, -2.0, 7.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_constant_gives_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.3, -2.0]));
    let c = g.constant(Tensor::scalar(4.0));
    let out = g.scale(c, 2.0).unwrap();
    g.backward(out).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_of_mean_squared_error_matches_hand_formula() {
    let xs = vec![0.5, -1.25, 2.0, 0.0];
    let ts = vec![1.0, 0.5, -0.5, 0.25];
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(xs.clone()));
    let t = g.constant(Tensor::from_vec(ts.clone()));
    let d = g.sub(x, t).unwrap();
    let d2 = g.mul(d, d).unwrap();
    let m = g.mean(d2).unwrap();
    g.backward(m).unwrap();
    for ((gx, x), t) in g.grad(x).unwrap().iter().zip(&xs).zip(&ts) {
        assert!((gx - 2.0 * (x - t) / 4.0).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_empty_graph() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(NumericsError::NotScalar { .. })));
    let mut other = Graph::new();
    assert_eq!(other.backward(x), Err(NumericsError::EmptyGraph));
}

#[test]
fn shape_error_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    match err {
        NumericsError::Shape {
            op,
            node,
            expected,
            actual,
        } => {
            assert_eq!(op, "add");
            assert_eq!(node, 2);
            assert_eq!(expected, "[2, 3]");
            assert_eq!(actual, "[3, 2]");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn finite_diff_on_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[16], -1.0, 1.0, &mut rng);
    let err = finite_diff_check(
        |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn finite_diff_on_constant_is_zero() {
    let x = Tensor::from_vec(vec![0.1, 0.2]);
    let err = finite_diff_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn finite_diff_reports_offending_component() {
    let x = Tensor::from_vec(vec![0.5, 0.0, 0.25]);
    let err = finite_diff_check(
        |g, x| {
            let y = g.sqrt(x)?;
            g.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { component: 1, .. }), "{err:?}");
}

#[test]
fn fd_scores_separate_tiny_components_from_the_vector() {
    let c = FdComparison {
        analytic: vec![3.0, 1e-9],
        central: vec![3.0, 1.1e-9],
    };
    assert!((c.max_relative() - 0.1e-9 / (2.1e-9 + 1e-12)).abs() < 1e-12);
    assert!(c.normwise_relative() < 1e-10);
    let wrong = FdComparison {
        analytic: vec![3.0, 4.0],
        central: vec![0.0, 0.0],
    };
    assert!((wrong.normwise_relative() - 1.0).abs() < 1e-12);
}

#[test]
fn fd_gradients_agree_with_check() {
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
    let f = |g: &mut Graph, x: Var| {
        let y = g.mul(x, x)?;
        let y = g.mul(y, x)?;
        g.sum(y)
    };
    let c = finite_diff_gradients(f, &x, 1e-5).unwrap();
    assert_eq!(c.max_relative(), finite_diff_check(f, &x, 1e-5).unwrap());
    for (a, v) in c.analytic.iter().zip(x.data()) {
        assert!((a - 3.0 * v * v).abs() < 1e-12);
    }
}

#[test]
fn finite_diff_rejects_bad_step() {
    let x = Tensor::from_vec(vec![0.5]);
    assert_eq!(
        finite_diff_check(|g, x| g.sum(x), &x, 1e-2),
        Err(NumericsError::InvalidStep(1e-2))
    );
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 8, 8, 3], -1.0, 1.0, &mut rng);
    let w = random(&[3, 3, 3, 4], -1.0, 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(xv, wv, b, 1, 1).unwrap();
        let y = g.max_pool2(y).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

fn check_op(seed: u64, x: Tensor, build: impl Fn(&mut Graph, Var, u64) -> Result<Var, NumericsError>) {
    let err = finite_diff_check(|g, v| build(g, v, seed), &x, H).unwrap();
    assert!(err < TOL, "relative error {err} at seed {seed}");
}

macro_rules! elementwise {
    ($name:ident, $input:expr, |$g:ident, $x:ident| $body:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn $name(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let input: Tensor = $input(&mut rng);
                check_op(seed, input, |$g, $x, s| {
                    let y = $body?;
                    weighted_sum($g, y, s)
                });
            }
        }
    };
}

elementwise!(grad_log, |r: &mut ChaCha8Rng| random(&[3, 4], 0.1, 2.0, r), |g, x| g
    .log(x));
elementwise!(grad_exp, |r: &mut ChaCha8Rng| random(&[3, 4], -2.0, 2.0, r), |g, x| g
    .exp(x));
elementwise!(grad_sqrt, |r: &mut ChaCha8Rng| random(&[3, 4], 0.1, 2.0, r), |g, x| g
    .sqrt(x));
elementwise!(grad_acos, |r: &mut ChaCha8Rng| random(&[3, 4], -0.9, 0.9, r), |g, x| g
    .acos(x));
elementwise!(grad_cos, |r: &mut ChaCha8Rng| random(&[3, 4], -3.0, 3.0, r), |g, x| g
    .cos(x));
elementwise!(
    grad_sigmoid,
    |r: &mut ChaCha8Rng| random(&[3, 4], -3.0, 3.0, r),
    |g, x| g.sigmoid(x)
);
elementwise!(
    grad_leaky_relu,
    |r: &mut ChaCha8Rng| away_from_zero(&[3, 4], r),
    |g, x| g.leaky_relu(x, 0.2)
);
elementwise!(grad_clamp, |r: &mut ChaCha8Rng| away_from_zero(&[3, 4], r), |g, x| g
    .clamp(x, -0.5, 0.5));
elementwise!(
    grad_scale,
    |r: &mut ChaCha8Rng| random(&[3, 4], -1.0, 1.0, r),
    |g, x| g.scale(x, -1.7)
);
elementwise!(
    grad_add_scalar,
    |r: &mut ChaCha8Rng| random(&[3, 4], -1.0, 1.0, r),
    |g, x| g.add_scalar(x, 0.3)
);
elementwise!(
    grad_softmax,
    |r: &mut ChaCha8Rng| random(&[3, 5], -2.0, 2.0, r),
    |g, x| g.softmax(x)
);
elementwise!(
    grad_log_sum_exp,
    |r: &mut ChaCha8Rng| random(&[3, 5], -2.0, 2.0, r),
    |g, x| g.log_sum_exp_last(x)
);
elementwise!(
    grad_sum_last,
    |r: &mut ChaCha8Rng| random(&[3, 5], -1.0, 1.0, r),
    |g, x| g.sum_last(x)
);
elementwise!(
    grad_sum_leading,
    |r: &mut ChaCha8Rng| random(&[3, 5], -1.0, 1.0, r),
    |g, x| g.sum_leading(x)
);
elementwise!(
    grad_broadcast_last,
    |r: &mut ChaCha8Rng| random(&[3, 2], -1.0, 1.0, r),
    |g, x| g.broadcast_last(x, 4)
);
elementwise!(
    grad_reshape,
    |r: &mut ChaCha8Rng| random(&[3, 4], -1.0, 1.0, r),
    |g, x| g.reshape(x, &[2, 6])
);
elementwise!(
    grad_slice_rows,
    |r: &mut ChaCha8Rng| random(&[5, 3], -1.0, 1.0, r),
    |g, x| g.slice_rows(x, 1, 3)
);
elementwise!(
    grad_select_rows,
    |r: &mut ChaCha8Rng| random(&[5, 3], -1.0, 1.0, r),
    |g, x| g.select_rows(x, &[4, 0, 4, 2])
);
elementwise!(
    grad_gather_last,
    |r: &mut ChaCha8Rng| random(&[4, 3], -1.0, 1.0, r),
    |g, x| g.gather_last(x, &[2, 0, 1, 2])
);
elementwise!(
    grad_max_pool,
    |r: &mut ChaCha8Rng| separated(&[2, 4, 4, 3], r),
    |g, x| g.max_pool2(x)
);
elementwise!(
    grad_upsample,
    |r: &mut ChaCha8Rng| random(&[2, 2, 3, 2], -1.0, 1.0, r),
    |g, x| g.upsample_nearest(x, 2)
);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grad_sum_and_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 4], -1.0, 1.0, &mut rng);
        check_op(seed, x.clone(), |g, x, _| { let y = g.mul(x, x)?; g.sum(y) });
        check_op(seed, x, |g, x, _| { let y = g.mul(x, x)?; g.mean(y) });
    }

    #[test]
    fn grad_binary_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 6], 0.5, 1.5, &mut rng);
        // x is split into two halves that play both operand roles.
        let split = |g: &mut Graph, x: Var| -> Result<(Var, Var), NumericsError> {
            Ok((g.slice_rows(x, 0, 1)?, g.slice_rows(x, 1, 1)?))
        };
        check_op(seed, x.clone(), |g, x, s| { let (a, b) = split(g, x)?; let y = g.add(a, b)?; weighted_sum(g, y, s) });
        check_op(seed, x.clone(), |g, x, s| { let (a, b) = split(g, x)?; let y = g.sub(a, b)?; weighted_sum(g, y, s) });
        check_op(seed, x.clone(), |g, x, s| { let (a, b) = split(g, x)?; let y = g.mul(a, b)?; weighted_sum(g, y, s) });
        check_op(seed, x, |g, x, s| { let (a, b) = split(g, x)?; let y = g.div(a, b)?; weighted_sum(g, y, s) });
    }

    #[test]
    fn grad_concat_and_bias(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4, 3], -1.0, 1.0, &mut rng);
        check_op(seed, x.clone(), |g, x, s| {
            let a = g.slice_rows(x, 0, 1)?;
            let y = g.concat_rows(&[x, a, x])?;
            weighted_sum(g, y, s)
        });
        check_op(seed, x, |g, x, s| {
            let b = g.slice_rows(x, 3, 1)?;
            let b = g.reshape(b, &[3])?;
            let y = g.add_bias(x, b)?;
            weighted_sum(g, y, s)
        });
    }

    #[test]
    fn grad_matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[7, 3], -1.0, 1.0, &mut rng);
        check_op(seed, x, |g, x, s| {
            let a = g.slice_rows(x, 0, 4)?;
            let b = g.slice_rows(x, 4, 3)?;
            let y = g.matmul(a, b)?;
            weighted_sum(g, y, s)
        });
    }

    #[test]
    fn grad_conv2d(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (2, 1, 0), (4, 2, 1)] {
            // image [2,5,5,2], weight [k,k,2,3] and bias [3] packed into one vector
            let len = 100 + k * k * 6 + 3;
            let x = random(&[len], -1.0, 1.0, &mut rng);
            let err = finite_diff_check(|g, x| {
                let img = g.slice_rows(x, 0, 100)?;
                let img = g.reshape(img, &[2, 5, 5, 2])?;
                let w = g.slice_rows(x, 100, k * k * 6)?;
                let w = g.reshape(w, &[k, k, 2, 3])?;
                let b = g.slice_rows(x, len - 3, 3)?;
                let y = g.conv2d(img, w, b, stride, pad)?;
                weighted_sum(g, y, seed)
            }, &x, H).unwrap();
            prop_assert!(err < TOL, "k {} stride {} error {}", k, stride, err);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..9, spread in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(random(&[rows, cols], -spread, spread, &mut rng));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
