mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::fixture;
use nlreg::controller::Controller;
use nlreg::expr::{parse, Expr, ExprKind, Func};
use nlreg::monomial_tensor::TensorAlgebra;
use nlreg::nlr_engine::{solve_model, SolveOptions};

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (0.0f64..100.0).prop_map(Expr::num),
        (0usize..3).prop_map(Expr::state),
        (0usize..2).prop_map(|i| Expr::new(ExprKind::Input(i))),
    ]
}

fn expr() -> impl Strategy<Value = Expr> {
    let func = prop::sample::select(vec![Func::Sin, Func::Cos, Func::Exp, Func::Tanh, Func::Ln, Func::Cosh]);
    leaf().prop_recursive(5, 48, 2, move |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(ExprKind::Add(Box::new(a), Box::new(b)))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(ExprKind::Sub(Box::new(a), Box::new(b)))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::new(ExprKind::Mul(Box::new(a), Box::new(b)))),
            (inner.clone(), 0.5f64..9.0).prop_map(|(a, d)| Expr::new(ExprKind::Div(Box::new(a), Box::new(Expr::num(d))))),
            (inner.clone(), 1u32..5).prop_map(|(a, p)| Expr::new(ExprKind::Pow(Box::new(a), p))),
            inner.clone().prop_map(|a| Expr::new(ExprKind::Neg(Box::new(a)))),
            (func.clone(), inner).prop_map(|(f, a)| Expr::new(ExprKind::Call(f, Box::new(a)))),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn printed_form_reparses_to_the_same_tree(e in expr()) {
        let first = parse(&e.to_string()).unwrap();
        let second = parse(&first.to_string()).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.to_string(), second.to_string());
    }

    #[test]
    fn printed_form_evaluates_identically(e in expr(), x in prop::collection::vec(-1.0f64..1.0, 3),
                                          u in prop::collection::vec(-1.0f64..1.0, 2)) {
        let back = parse(&e.to_string()).unwrap();
        let (a, b) = (e.eval(&x, &u), back.eval(&x, &u));
        prop_assert!(a == b || (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

/// Expanded drift, input gains and cost against direct evaluation at 200
/// points in the ball of radius 0.3.
#[test]
fn expansion_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in ["example51.json", "f8.json", "f8_constrained.json", "linear.json", "scalar.json"] {
        let model = fixture(name);
        let order = 14;
        let alg = TensorAlgebra::new(model.n, order + 2);
        let (sys, cost) = nlreg::dynamics::expand_model(&model, &alg, order).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let dir: Vec<f64> = (0..model.n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let r = 0.3 * rng.random::<f64>().powf(1.0 / model.n as f64);
            let x: Vec<f64> = dir.iter().map(|v| v / norm * r).collect();
            let mut check = |series: f64, direct: f64| {
                worst = worst.max((series - direct).abs() / direct.abs().max(1e-3));
            };
            let f = sys.f.eval(&alg, &x);
            let fd = model.f_eval(&x);
            for i in 0..model.n {
                check(f[i], fd[i]);
            }
            let gd = model.g_eval(&x);
            for j in 0..model.m {
                let gj = sys.g[j].eval(&alg, &x);
                for i in 0..model.n {
                    check(gj[i], gd[(i, j)]);
                }
            }
            check(cost.q.eval(&alg, &x)[0], model.q_eval(&x));
        }
        assert!(worst <= 1e-6, "{name}: worst relative error {worst:.3e}");
    }
}

/// With small inputs the tanh penalty acts like the quadratic one with the
/// same `R₁ = I`.
#[test]
fn saturating_and_quadratic_agree_near_origin() {
    let quad = fixture("f8.json");
    let sat = fixture("f8_constrained.json");
    let sq = solve_model(&quad, 7, &SolveOptions::default()).unwrap();
    let ss = solve_model(&sat, 7, &SolveOptions::default()).unwrap();
    let cq = Controller::new(&quad, &sq, 7).unwrap();
    let cs = Controller::new(&sat, &ss, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x: Vec<f64> = x.iter().map(|v| v / norm * 1e-3 * rng.random::<f64>()).collect();
        let d = (cq.eval_control(&x).unwrap() - cs.eval_control(&x).unwrap()).amax();
        assert!(d < 1e-6, "{x:?}: {d:.3e}");
    }
}

#[test]
fn malformed_input_reports_location() {
    let err = parse("x1 + * x2").unwrap_err().to_string();
    assert!(err.contains("line 1, column 6"), "{err}");
    let err = parse("x1 +\n  sinh(x2)").unwrap_err().to_string();
    assert!(err.contains("line 2, column 3"), "{err}");
}
