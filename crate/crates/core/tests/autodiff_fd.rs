//! Central-difference validation for every differentiable tape op.
//!
//! Each case builds a scalar loss exercising one op (plus sum/add glue),
//! at several random points sampled away from non-differentiable kinks,
//! and requires max relative error <= 1e-4 with h = 1e-5.

use ldkl::tensor::{finite_diff_check, ParamGroup, ParamStore, Tape, Tensor, Var};
use ldkl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const POINTS: u64 = 10;

/// Run `build` at `POINTS` random parameter settings and assert the
/// finite-difference error stays below `TOL`.
fn check_op<F>(name: &str, shapes: &[(&str, Vec<usize>, f64, f64)], build: F)
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let mut store = ParamStore::new();
        for (pname, shape, lo, hi) in shapes {
            let t = Tensor::uniform(shape, *lo, *hi, &mut rng);
            store.register(pname, t, true, ParamGroup::Nn).unwrap();
        }
        let err = finite_diff_check(&mut store, H, |tape, store| build(tape, store)).unwrap();
        assert!(err <= TOL, "{name}: relative error {err} at seed {seed}");
    }
}

#[test]
fn fd_elementwise_arithmetic() {
    // a+b, a-b, a*b, a/b chained into one scalar; b bounded away from 0.
    check_op(
        "arithmetic",
        &[("a", vec![4], -2.0, 2.0), ("b", vec![4], 0.5, 2.0)],
        |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let sum = t.add(a, b)?;
            let diff = t.sub(a, b)?;
            let prod = t.mul(sum, diff)?;
            let quot = t.div(prod, b)?;
            Ok(t.sum_all(quot))
        },
    );
}

#[test]
fn fd_scalar_broadcast_ops() {
    check_op(
        "scalar ops",
        &[("a", vec![5], -1.5, 1.5), ("s", vec![1], 0.3, 1.7)],
        |t, s| {
            let a = t.param(s, "a")?;
            let sv = t.param(s, "s")?;
            let x = t.mul_scalar(a, 0.7);
            let x = t.add_scalar(x, 0.1);
            let x = t.neg(x);
            let x = t.mul_scalar_var(x, sv)?;
            Ok(t.mean_all(x))
        },
    );
}

#[test]
fn fd_unary_nonlinearities() {
    check_op("exp/tanh", &[("a", vec![6], -1.5, 1.5)], |t, s| {
        let a = t.param(s, "a")?;
        let e = t.exp(a);
        let th = t.tanh(a);
        let both = t.mul(e, th)?;
        Ok(t.sum_all(both))
    });
    check_op("ln/sqrt", &[("a", vec![6], 0.3, 3.0)], |t, s| {
        let a = t.param(s, "a")?;
        let l = t.ln(a);
        let r = t.sqrt(a);
        let both = t.mul(l, r)?;
        Ok(t.sum_all(both))
    });
    // elu sampled away from the origin kink; clamp away from its threshold.
    check_op("elu", &[("a", vec![6], 0.2, 2.0)], |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.sum_all(t.elu(a)))
    });
    check_op("elu-negative", &[("a", vec![6], -2.0, -0.2)], |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.sum_all(t.elu(a)))
    });
    check_op("clamp_min", &[("a", vec![6], 0.5, 2.0)], |t, s| {
        let a = t.param(s, "a")?;
        Ok(t.sum_all(t.clamp_min(a, 0.0)))
    });
}

#[test]
fn fd_reductions_and_reshape() {
    check_op("reductions", &[("a", vec![3, 4], -1.0, 1.0)], |t, s| {
        let a = t.param(s, "a")?;
        let rows = t.sum_axis0(a)?;
        let sq = t.mul(rows, rows)?;
        let flat = t.reshape(a, vec![12])?;
        let m = t.mean_all(flat);
        let total = t.sum_all(sq);
        t.add(total, m)
    });
}

#[test]
fn fd_matmul_transpose() {
    check_op(
        "matmul",
        &[("a", vec![3, 4], -1.0, 1.0), ("b", vec![4, 2], -1.0, 1.0)],
        |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let c = t.matmul(a, b)?;
            let ct = t.transpose(c)?;
            let c2 = t.mul(ct, ct)?;
            Ok(t.sum_all(c2))
        },
    );
}

#[test]
fn fd_concat_slice_stack() {
    check_op(
        "concat/slice",
        &[("a", vec![3, 2], -1.0, 1.0), ("b", vec![3, 3], -1.0, 1.0)],
        |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let cat = t.concat_cols(a, b)?;
            let mid = t.slice_cols(cat, 1, 4)?;
            let sq = t.mul(mid, mid)?;
            Ok(t.sum_all(sq))
        },
    );
    check_op(
        "stack_cols",
        &[("u", vec![4], -1.0, 1.0), ("v", vec![4], -1.0, 1.0)],
        |t, s| {
            let u = t.param(s, "u")?;
            let v = t.param(s, "v")?;
            let m = t.stack_cols(&[u, v])?;
            let e = t.exp(m);
            Ok(t.sum_all(e))
        },
    );
}

#[test]
fn fd_per_channel_ops() {
    check_op(
        "per-channel",
        &[
            ("x", vec![3, 2, 2, 2], -1.0, 1.0),
            ("b", vec![2], -0.5, 0.5),
            ("g", vec![2], 0.5, 1.5),
        ],
        |t, s| {
            let x = t.param(s, "x")?;
            let b = t.param(s, "b")?;
            let g = t.param(s, "g")?;
            let y = t.add_per_channel(x, b)?;
            let y = t.mul_per_channel(y, g)?;
            let y = t.sub_per_channel(y, b)?;
            let m = t.per_channel_mean(y)?;
            let sq = t.mul(m, m)?;
            let spread = t.mul(y, y)?;
            let a = t.sum_all(sq);
            let c = t.sum_all(spread);
            t.add(a, c)
        },
    );
}

#[test]
fn fd_conv2d() {
    for (stride, padding) in [(1usize, 1usize), (2, 1), (1, 0)] {
        check_op(
            &format!("conv2d s{stride} p{padding}"),
            &[
                ("x", vec![2, 2, 5, 5], -1.0, 1.0),
                ("w", vec![3, 2, 3, 3], -0.5, 0.5),
            ],
            |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let y = t.conv2d(x, w, stride, padding)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
        );
    }
}

#[test]
fn fd_conv_transpose2d() {
    for (stride, padding, outpad) in [(1usize, 1usize, 0usize), (2, 1, 1)] {
        check_op(
            &format!("convT s{stride} p{padding} op{outpad}"),
            &[
                ("x", vec![2, 2, 4, 4], -1.0, 1.0),
                ("w", vec![2, 3, 3, 3], -0.5, 0.5),
            ],
            |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let y = t.conv_transpose2d(x, w, stride, padding, outpad)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
        );
    }
}

#[test]
fn fd_cholesky() {
    // A = M M^T + 3I stays comfortably positive definite under perturbation.
    check_op("cholesky", &[("m", vec![4, 4], -1.0, 1.0)], |t, s| {
        let m = t.param(s, "m")?;
        let mt = t.transpose(m)?;
        let a = t.matmul(m, mt)?;
        let eye = t.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 3.0 } else { 0.0 }));
        let a = t.add(a, eye)?;
        let l = t.cholesky(a)?;
        let d = t.diag(l)?;
        let logs = t.ln(d);
        let all = t.sum_all(l);
        let dl = t.sum_all(logs);
        t.add(all, dl)
    });
}

#[test]
fn fd_triangular_solves() {
    check_op(
        "solves",
        &[("raw", vec![3, 3], -0.6, 0.6), ("b", vec![3, 2], -1.0, 1.0)],
        |t, s| {
            let raw = t.param(s, "raw")?;
            let b = t.param(s, "b")?;
            let l = t.lower_tri_exp_diag(raw)?;
            let x = t.solve_lower(l, b)?;
            let y = t.solve_lower_t(l, x)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
    );
}

#[test]
fn fd_weighted_sqdist() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let points = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
    check_op(
        "weighted_sqdist",
        &[("a", vec![4, 3], -1.0, 1.0), ("w", vec![3], 0.2, 2.0)],
        |t, s| {
            let a = t.param(s, "a")?;
            let w = t.param(s, "w")?;
            let d = t.weighted_sqdist(a, &points, w)?;
            let k = t.exp(t.mul_scalar(d, -0.5));
            Ok(t.sum_all(k))
        },
    );
}

#[test]
fn deterministic_forward_given_same_inputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng));
        let w = tape.constant(Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        let s = tape.sum_all(y);
        tape.item(s).to_bits()
    };
    assert_eq!(run(), run());
}
