//! Finite-difference checks for every tape primitive and every training
//! loss, over random instances.

mod common;

use common::{normal, rng, H, TOL};
use fairadapt::numcore::{grad_check, Matrix, Tape, Var};
use fairadapt::Result;
use proptest::prelude::*;

type Prim = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces a matrix-valued output to a scalar with fixed random weights so
/// every output coordinate contributes a distinct adjoint.
fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(v).shape();
    let w = t.leaf(normal(&mut rng(seed ^ 0xABCD), r, c, 1.0));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn check(prim: Prim, inputs: Vec<Matrix>, seed: u64) -> f64 {
    grad_check(
        |t, v| {
            let out = prim(t, v)?;
            weighted_sum(t, out, seed)
        },
        &inputs,
        H,
    )
    .unwrap()
}

/// Values bounded away from zero, for kinks and domains.
fn away_from_zero(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let m = normal(r, rows, cols, 1.0);
    let data = m.as_slice().iter().map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { *v }).collect();
    Matrix::new(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cases: Vec<(Prim, Vec<Matrix>)> = vec![
            (|t, v| t.matmul(v[0], v[1]), vec![normal(&mut r, 3, 4, 1.0), normal(&mut r, 4, 2, 1.0)]),
            (|t, v| t.add_bias(v[0], v[1]), vec![normal(&mut r, 3, 4, 1.0), normal(&mut r, 1, 4, 1.0)]),
            (|t, v| t.add(v[0], v[1]), vec![normal(&mut r, 2, 3, 1.0), normal(&mut r, 2, 3, 1.0)]),
            (|t, v| t.sub(v[0], v[1]), vec![normal(&mut r, 2, 3, 1.0), normal(&mut r, 2, 3, 1.0)]),
            (|t, v| t.mul(v[0], v[1]), vec![normal(&mut r, 2, 3, 1.0), normal(&mut r, 2, 3, 1.0)]),
            (|t, v| t.scale(v[0], -1.7), vec![normal(&mut r, 2, 3, 1.0)]),
            (|t, v| t.add_scalar(v[0], 0.4), vec![normal(&mut r, 2, 3, 1.0)]),
            (|t, v| Ok(t.sigmoid(v[0])), vec![normal(&mut r, 2, 3, 2.0)]),
            (|t, v| Ok(t.row_sum(v[0])), vec![normal(&mut r, 3, 4, 1.0)]),
            (|t, v| t.select_rows(v[0], &[2, 0, 2, 1]), vec![normal(&mut r, 3, 2, 1.0)]),
            (|t, v| t.mean(v[0]), vec![normal(&mut r, 3, 2, 1.0)]),
        ];
        for (k, (prim, inputs)) in cases.into_iter().enumerate() {
            let err = check(prim, inputs, seed);
            prop_assert!(err <= TOL, "case {k}: rel err {err:e}");
        }
    }

    #[test]
    fn kinked_and_domain_primitives_match_off_the_kink(seed in any::<u64>()) {
        let mut r = rng(seed);
        let positive = |r: &mut rand_chacha::ChaCha8Rng| {
            let m = away_from_zero(r, 2, 3);
            Matrix::new(2, 3, m.as_slice().iter().map(|v| v.abs() + 0.1).collect()).unwrap()
        };
        let cases: Vec<(Prim, Vec<Matrix>)> = vec![
            (|t, v| Ok(t.relu(v[0])), vec![away_from_zero(&mut r, 2, 3)]),
            (|t, v| t.sqrt(v[0]), vec![positive(&mut r)]),
            (|t, v| t.ln(v[0]), vec![positive(&mut r)]),
            (|t, v| Ok(t.clamp(v[0], -0.5, 0.5)), vec![away_from_zero(&mut r, 2, 3)]),
        ];
        for (k, (prim, inputs)) in cases.into_iter().enumerate() {
            if k == 3 && inputs[0].as_slice().iter().any(|v| (v.abs() - 0.5).abs() < 1e-3) {
                continue;
            }
            let err = check(prim, inputs, seed);
            prop_assert!(err <= TOL, "case {k}: rel err {err:e}");
        }
    }

    #[test]
    fn weighted_bce_through_a_network(seed in any::<u64>()) {
        let err = common::bce_net_error(seed);
        prop_assert!(err <= TOL, "rel err {err:e}");
    }

    #[test]
    fn contrastive_similarity_loss(seed in any::<u64>()) {
        let err = common::gsim_error(seed);
        prop_assert!(err <= TOL, "rel err {err:e}");
    }

    #[test]
    fn full_objective_with_reversal(seed in any::<u64>()) {
        let err = common::cfa_objective_error(seed);
        prop_assert!(err <= TOL, "rel err {err:e}");
    }

    #[test]
    fn reversal_backward_is_scaled_negation(seed in any::<u64>(), scale in 0.0f64..4.0) {
        let mut r = rng(seed);
        let x0 = normal(&mut r, 3, 5, 1.0);
        let w = normal(&mut r, 3, 5, 1.0);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = t.reverse_gradient(x, scale);
        prop_assert_eq!(t.value(y), &x0);
        let wv = t.leaf(w.clone());
        let p = t.mul(y, wv)?;
        let s = t.sum(p);
        let g = t.backward(s)?.wrt(x);
        for (gi, wi) in g.as_slice().iter().zip(w.as_slice()) {
            prop_assert_eq!(*gi, -scale * wi);
        }
    }
}

#[test]
fn hand_differentiated_cases() {
    let grad = |x0: f64, f: &dyn Fn(&mut Tape, Var) -> Var| {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(x0));
        let y = f(&mut t, x);
        t.backward(y).unwrap().wrt(x).item().unwrap()
    };
    assert_eq!(grad(3.0, &|_, x| x), 1.0);
    assert_eq!(grad(3.0, &|t, x| t.mul(x, x).unwrap()), 6.0);
    assert_eq!(
        grad(1.3, &|t, w| {
            let z = t.leaf(Matrix::scalar(0.0));
            let p = t.mul(w, z).unwrap();
            t.sigmoid(p)
        }),
        0.0
    );
}

#[test]
fn affine_and_constant_functions() {
    let theta = [Matrix::new(1, 3, vec![0.3, -2.0, 5.0]).unwrap()];
    let affine = grad_check(
        |t, v| {
            let a = t.scale(v[0], 2.5)?;
            let s = t.sum(a);
            t.add_scalar(s, 1.0)
        },
        &theta,
        H,
    )
    .unwrap();
    assert!(affine <= 1e-9, "{affine:e}");
    let constant = grad_check(
        |t, v| {
            let z = t.scale(v[0], 0.0)?;
            let s = t.sum(z);
            t.add_scalar(s, 4.0)
        },
        &theta,
        H,
    )
    .unwrap();
    assert_eq!(constant, 0.0);
}
