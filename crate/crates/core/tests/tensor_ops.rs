use evln::tensor::{grad_check, grad_check_many, Rng, Tape, Tensor, Var};
use evln::{Error, Result};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(0.2, 2.0))
}

/// `sum(out * weights)` with fixed random weights so no gradient is trivial.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = random(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

const SHAPES: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::inference();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = tape.matmul(p, m).unwrap();
    assert_eq!(tape.data(out), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let report = grad_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            Ok(tape.sum(c))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn conv2d_all_ones() {
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.data(y), &[9.0]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = Rng::new(5);
    let input = random(&mut rng, &[2, 1, 4, 5]);
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let w = tape.constant(k);
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
    assert_eq!(tape.shape(y), input.shape());
}

#[test]
fn conv2d_output_extents() {
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 2, 7, 6]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 2]));
    let y = tape.conv2d(x, w, 2, 1).unwrap();
    // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 2) / 2) + 1 = 4
    assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
}

#[test]
fn conv2d_kernel_larger_than_padded_input() {
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Dimension(_))));
    assert!(matches!(tape.conv2d(x, w, 0, 2), Err(Error::Parameter(_))));
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1)] {
        let report = grad_check_many(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], stride, pad)?;
                Ok(tape.sum(y))
            },
            &[x.clone(), w.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "stride {stride} pad {pad}: {report:?}");
    }
    // Strided case; checked at the general per-op tolerance.
    let report = grad_check_many(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], 2, 1)?;
            weighted_sum(tape, y, 2)
        },
        &[x.clone(), w.clone()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "strided: {report:?}");
    // Pointwise kernels take a separate code path.
    let w1 = random(&mut rng, &[2, 3, 1, 1]);
    let report = grad_check_many(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], 1, 0)?;
            weighted_sum(tape, y, 1)
        },
        &[x, w1],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn elementwise_reference_values() {
    let mut tape = Tape::inference();
    let x = tape.constant(t(&[3], &[0.0, -3.0, 3.0]));
    let sp = tape.softplus(x);
    assert!((tape.data(sp)[0] - 0.6931471805599453).abs() < 1e-16);
    let r = tape.relu(x);
    assert_eq!(&tape.data(r)[1..], &[0.0, 3.0]);

    let big = tape.constant(Tensor::scalar(50.0));
    let sp = tape.softplus(big);
    let v = tape.scalar(sp).unwrap();
    assert!(v.is_finite());
    // log(1 + e^50) at 40 digits: 50.000000000000000000000192875
    assert!((v - 50.0).abs() < 1e-12);
    let huge = tape.constant(Tensor::scalar(1e300));
    let sp = tape.softplus(huge);
    assert_eq!(tape.scalar(sp).unwrap(), 1e300);
}

#[test]
fn log_and_sqrt_domain() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, -1.0]));
    assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    assert!(matches!(tape.sqrt(x), Err(Error::Domain(_))));
    let z = tape.constant(Tensor::scalar(0.0));
    let l = tape.log(z).unwrap();
    assert_eq!(tape.scalar(l).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn broadcast_incompatible_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
}

#[test]
fn softmax_temperature_examples() {
    let mut tape = Tape::inference();
    let q = tape.constant(Tensor::zeros(&[1, 4]));
    for tau in [0.5, 1.0, 7.0] {
        let p = tape.softmax(q, tau).unwrap();
        assert_eq!(tape.data(p), &[0.25; 4]);
    }
    let q = tape.constant(t(&[1, 2], &[2f64.ln(), 0.0]));
    let p = tape.softmax(q, 1.0).unwrap();
    assert!((tape.data(p)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.data(p)[1] - 1.0 / 3.0).abs() < 1e-15);

    // Extended-precision reference for q = [3.1, -0.4, 1.7], tau = 2.
    let reference = [
        0.598673609674822250273161,
        0.1040338739929064202044776,
        0.2972925163322713295223615,
    ];
    let q = tape.constant(t(&[1, 3], &[3.1, -0.4, 1.7]));
    let p = tape.softmax(q, 2.0).unwrap();
    for (a, b) in tape.data(p).iter().zip(reference) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(tape.softmax(q, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(tape.softmax(q, -1.0), Err(Error::Parameter(_))));
}

#[test]
fn grad_check_quadratic() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let sq = tape.square(v);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0, 6.0]);

    let err = grad_check(
        |tape, v| {
            let sq = tape.square(v);
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_softplus_sum() {
    let mut rng = Rng::new(3);
    let x = random(&mut rng, &[4, 5]);
    let err = grad_check(
        |tape, v| {
            let s = tape.softplus(v);
            Ok(tape.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_non_scalar() {
    let x = t(&[2], &[1.0, 2.0]);
    let err = grad_check(|tape, v| Ok(tape.square(v)), &x, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

type UnaryCase = (&'static str, fn(&mut Rng, &[usize]) -> Tensor, fn(&mut Tape, Var) -> Result<Var>);

#[test]
fn every_differentiable_op_passes_grad_check_on_three_shapes() {
    let unary: Vec<UnaryCase> = vec![
        ("relu", away_from_zero, |t, v| Ok(t.relu(v))),
        ("exp", random, |t, v| Ok(t.exp(v))),
        ("log", positive, |t, v| t.log(v)),
        ("sqrt", positive, |t, v| t.sqrt(v)),
        ("softplus", random, |t, v| Ok(t.softplus(v))),
        ("square", random, |t, v| Ok(t.square(v))),
        ("scale", random, |t, v| Ok(t.scale(v, -2.5))),
        ("add_scalar", random, |t, v| Ok(t.add_scalar(v, 0.7))),
        ("mean", random, |t, v| t.mean(v)),
        ("sum_axis0", random, |t, v| t.sum_axis(v, 0)),
        ("softmax", random, |t, v| t.softmax(v, 1.7)),
        ("log_softmax", random, |t, v| t.log_softmax(v, 0.8)),
        ("logsumexp", random, |t, v| t.logsumexp(v)),
        ("reshape", random, |t, v| {
            let n = t.value(v).len();
            t.reshape(v, &[n])
        }),
    ];
    let mut rng = Rng::new(99);
    for (name, gen, op) in &unary {
        for (si, shape) in SHAPES.iter().enumerate() {
            let x = gen(&mut rng, shape);
            let err = grad_check(
                |tape, v| {
                    let y = op(tape, v)?;
                    weighted_sum(tape, y, si as u64)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name} on {shape:?}: {err}");
        }
    }

    // Binary ops with and without broadcasting.
    let pairs: [(&[usize], &[usize]); 3] = [(&[4], &[4]), (&[3, 4], &[4]), (&[2, 3, 4], &[3, 1])];
    let binary: [(&str, fn(&mut Tape, Var, Var) -> Result<Var>); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    for (name, op) in binary {
        for (sa, sb) in pairs {
            let a = random(&mut rng, sa);
            let b = positive(&mut rng, sb);
            let report = grad_check_many(
                |tape, v| {
                    let y = op(tape, v[0], v[1])?;
                    weighted_sum(tape, y, 5)
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{name} {sa:?} {sb:?}: {report:?}");
        }
    }

    // Structural ops.
    for dims in [[1, 2, 3], [2, 3, 2], [3, 4, 5]] {
        let [b, m, k] = dims;
        let x = random(&mut rng, &[b, m, k]);
        let y = random(&mut rng, &[b, k, m + 1]);
        let report = grad_check_many(
            |tape, v| {
                let p = tape.bmm(v[0], v[1])?;
                let p = tape.transpose(p)?;
                weighted_sum(tape, p, 8)
            },
            &[x, y],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "bmm/transpose {dims:?}: {report:?}");

        let img = random(&mut rng, &[b, m, 2 * k, 2 * m + 1]);
        let err = grad_check(
            |tape, v| {
                let p = tape.avg_pool2(v)?;
                weighted_sum(tape, p, 9)
            },
            &img,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "avg_pool2 {dims:?}: {err}");

        let rows = random(&mut rng, &[b + 2, k]);
        let report = grad_check_many(
            |tape, v| {
                let idx: Vec<usize> = (0..b + 2).map(|r| (r * 7) % k).collect();
                let p = tape.pick(v[0], &idx)?;
                let s = tape.select_rows(v[1], &[1, 0, 1])?;
                let c = tape.concat_last(&[v[1], v[0]])?;
                let a = weighted_sum(tape, p, 1)?;
                let bb = weighted_sum(tape, s, 2)?;
                let cc = weighted_sum(tape, c, 3)?;
                let ab = tape.add(a, bb)?;
                tape.add(ab, cc)
            },
            &[rows.clone(), rows],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "pick/select/concat {dims:?}: {report:?}");
    }
}

#[test]
fn graphs_are_deterministic() {
    let run = || {
        let mut rng = Rng::new(1234);
        let x = random(&mut rng, &[2, 3, 6, 6]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let wv = tape.param(&w);
        let y = tape.conv2d(xv, wv, 1, 1).unwrap();
        let y = tape.softplus(y);
        let y = tape.reshape(y, &[2, 4 * 36]).unwrap();
        let y = tape.log_softmax(y, 2.0).unwrap();
        let loss = weighted_sum(&mut tape, y, 4).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.data(y).to_vec(),
            tape.grad(xv).unwrap().to_vec(),
            tape.grad(wv).unwrap().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn reset_tape_is_empty() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    tape.square(x);
    assert_eq!(tape.len(), 2);
    tape.reset();
    assert!(tape.is_empty());
}

#[test]
fn no_grad_region_records_no_rules() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let frozen = tape.without_recording(|tape| tape.square(x));
    assert!(!tape.requires_grad(frozen));
    let live = tape.square(x);
    let both = tape.add(frozen, live).unwrap();
    let s = tape.sum(both);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

fn tile(x: &Tensor, shape: &[usize]) -> Tensor {
    // Explicit broadcast by index arithmetic, independent of the kernel.
    let rank = shape.len();
    let xs = x.shape();
    let off = rank - xs.len();
    Tensor::from_fn(shape, |flat| {
        let mut rem = flat;
        let mut idx = vec![0; rank];
        for d in (0..rank).rev() {
            idx[d] = rem % shape[d];
            rem /= shape[d];
        }
        let src: Vec<usize> = (0..xs.len())
            .map(|d| if xs[d] == 1 { 0 } else { idx[d + off] })
            .collect();
        x.at(&src)
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12), tau in 0.05f64..10.0) {
        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let p = tape.softmax(q, tau).unwrap();
        for row in tape.data(p).chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn broadcasting_equals_explicit_tiling(seed in 0u64..1000, which in 0usize..3) {
        let cases: [(&[usize], &[usize], &[usize]); 3] = [
            (&[2, 3], &[3], &[2, 3]),
            (&[4, 1, 3], &[2, 1], &[4, 2, 3]),
            (&[1, 5], &[3, 1], &[3, 5]),
        ];
        let (sa, sb, so) = cases[which];
        let mut rng = Rng::new(seed);
        let a = random(&mut rng, sa);
        let b = random(&mut rng, sb);
        let mut tape = Tape::inference();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (ta, tb) = (tape.constant(tile(&a, so)), tape.constant(tile(&b, so)));
        for op in 0..4 {
            let f = |tape: &mut Tape, x: Var, y: Var| match op {
                0 => tape.add(x, y),
                1 => tape.sub(x, y),
                2 => tape.mul(x, y),
                _ => tape.div(x, y),
            };
            let r1 = f(&mut tape, va, vb).unwrap();
            let r2 = f(&mut tape, ta, tb).unwrap();
            prop_assert_eq!(tape.shape(r1), so);
            let b1: Vec<u64> = tape.data(r1).iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = tape.data(r2).iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
    }
}
