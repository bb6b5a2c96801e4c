mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fixture, random_cubic_system};
use nlreg::controller::Controller;
use nlreg::lin_solvers::{
    build_mk, lyapunov_residual, max_eigenvalue_sym, min_eigenvalue_sym, norm2, riccati_residual, solve_are, solve_lyapunov,
    spectral_abscissa, InverseNorm,
};
use nlreg::monomial_tensor::TensorAlgebra;
use nlreg::nlr_engine::{solve_model, verify_hjb, Problem, SolveOptions};
use nlreg::roc::{directional_radius, sample_directions, spherical_radius, Window};
use nlreg::solution_file::SolutionDocument;

fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    m.transpose() * m + DMatrix::identity(n, n) * 0.1
}

#[test]
fn riccati_and_lyapunov_residual_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=n.min(3));
        let a = random_matrix(&mut rng, n, n) * 2.0;
        let b = random_matrix(&mut rng, n, m);
        let q = random_spd(&mut rng, n);
        let r = random_spd(&mut rng, m);
        let are = solve_are(&a, &b, &q, &r).unwrap_or_else(|e| panic!("case {case}: {e}"));
        let r_inv = r.clone().try_inverse().unwrap();
        let res = riccati_residual(&a, &b, &q, &r_inv, &are.p1);
        assert!(res < 1e-10 * (1.0 + are.p1.norm()), "case {case}: ARE residual {res:.3e}");
        assert!(spectral_abscissa(&are.fc) < 0.0, "case {case}: closed loop not Hurwitz");
        assert!(min_eigenvalue_sym(&are.p1) > 0.0, "case {case}: P1 not positive definite");

        let shift = spectral_abscissa(&a) + rng.random_range(0.1..1.0);
        let hurwitz = &a - DMatrix::identity(n, n) * shift;
        let c = random_spd(&mut rng, n);
        let p = solve_lyapunov(&hurwitz, &c).unwrap();
        let lres = lyapunov_residual(&hurwitz, &p, &c);
        assert!(lres < 1e-11 * (1.0 + p.norm()), "case {case}: Lyapunov residual {lres:.3e}");
        assert!(min_eigenvalue_sym(&p) > 0.0);
    }
}

/// With `−(F_c + F_cᵀ) ≻ 0` the inverse is bounded by `2/λ_min(−F_c − F_cᵀ)`.
#[test]
fn dissipative_closed_loop_bounds_mk_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..12 {
        let n = rng.random_range(1..=3);
        let raw = random_matrix(&mut rng, n, n);
        let sym = (&raw + raw.transpose()) * 0.5;
        let fc = &raw - DMatrix::identity(n, n) * (max_eigenvalue_sym(&sym).max(0.0) + rng.random_range(0.05..1.0));
        let lam = min_eigenvalue_sym(&-(&fc + fc.transpose()));
        assert!(lam > 0.0);
        let alg = TensorAlgebra::new(n, 31);
        for k in [2, 5, 10, 20, 30] {
            let mk = build_mk(&alg, &fc, k, InverseNorm::Auto).unwrap();
            let inv = mk.inverse_norm().unwrap();
            assert!(inv <= 2.0 / lam + 1e-6, "case {case} k {k}: {inv} > {}", 2.0 / lam);
            let rhs = DVector::from_fn(mk.matrix().nrows(), |_, _| rng.random_range(-1.0..1.0));
            let sol = mk.solve(&rhs).unwrap();
            let be = (mk.matrix() * &sol - &rhs).norm();
            assert!(be <= 1e-10 * rhs.norm() * (1.0 + mk.matrix().norm() * inv), "case {case} k {k}: {be:.3e}");
        }
    }
}

fn fd_jacobian(f: impl Fn(&[f64]) -> DVector<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}

fn ball_point<R: Rng>(rng: &mut R, n: usize, radius: f64) -> Vec<f64> {
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let r = radius * rng.random_range(0.2..1.0);
    d.iter().map(|v| v / norm * r).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Symmetric Jacobians of `P_k x^k`, gradient consistency of `V`, the
    /// residual check and run-to-run determinism on random systems.
    #[test]
    fn random_system_invariants(seed in any::<u64>(), saturating in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, json) = random_cubic_system(&mut rng, saturating);
        let order = 6;
        let sol = solve_model(&model, order, &SolveOptions::default()).unwrap();
        prop_assert!(sol.is_complete(), "{}", json);
        let prob = Problem::new(&model, order).unwrap();
        prop_assert!(verify_hjb(&prob, &sol.p).passes(1e-8), "{}", json);

        let alg = TensorAlgebra::new(model.n, order);
        for (i, pk) in sol.p.iter().enumerate() {
            let k = i + 1;
            for _ in 0..20 {
                let x = ball_point(&mut rng, model.n, 0.5);
                let field = |y: &[f64]| pk * alg.basis(k).eval(y).unwrap();
                let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let h = 1e-5 * xn;
                let jac = fd_jacobian(field, &x, h);
                let asym = (&jac - jac.transpose()).amax();
                // natural size of the Jacobian: k ‖P_k‖ ‖x‖^{k−1}
                let scale = k as f64 * norm2(pk) * xn.powi(k as i32 - 1);
                // rounding floor of the difference quotient: cancellation in P_k x^k
                let xk = alg.basis(k).eval(&x).unwrap().abs();
                let floor = 100.0 * f64::EPSILON * (pk.abs() * xk).amax() / h;
                prop_assert!(asym <= 1e-6 * scale + floor, "k {}: asymmetry {:.3e} vs {:.3e}", k, asym, scale);
            }
        }

        let ctrl = Controller::new(&model, &sol, order).unwrap();
        // positivity of V only holds inside the region of convergence
        let radius = spherical_radius(&sol.p, Window::tail(order)).unwrap().min(0.4) * 0.5;
        for _ in 0..20 {
            let x = ball_point(&mut rng, model.n, radius);
            let grad = ctrl.gradient(&x).unwrap();
            let h = 1e-5 * x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fd = DVector::from_fn(model.n, |j, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                (ctrl.eval_value(&xp).unwrap() - ctrl.eval_value(&xm).unwrap()) / (2.0 * h)
            });
            prop_assert!((&fd - &grad).amax() <= 1e-5 * grad.amax());
            prop_assert!(ctrl.eval_value(&x).unwrap() > 0.0);
        }

        let again = solve_model(&model, order, &SolveOptions::default()).unwrap();
        prop_assert_eq!(
            SolutionDocument::from_solution(&model, &sol).to_json(),
            SolutionDocument::from_solution(&model, &again).to_json()
        );
    }
}

#[test]
fn saturating_control_never_exceeds_limit() {
    let model = fixture("f8_constrained.json");
    let sol = solve_model(&model, 7, &SolveOptions::default()).unwrap();
    let ctrl = Controller::new(&model, &sol, 7).unwrap();
    let limit = model.penalty.limit(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..2000 {
        let scale = 10f64.powf(rng.random_range(-4.0..3.0));
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let u = ctrl.eval_control(&x).unwrap()[0];
        assert!(u.abs() <= limit, "{x:?}: {u}");
    }
}

#[test]
fn linear_quadratic_problem_has_no_higher_terms() {
    let model = fixture("linear.json");
    let sol = solve_model(&model, 12, &SolveOptions::default()).unwrap();
    for pk in &sol.p[1..] {
        assert!(norm2(pk) <= 1e-12);
    }
}

#[test]
fn directional_norms_are_bounded_by_spectral_norms() {
    let model = fixture("f8.json");
    let sol = solve_model(&model, 12, &SolveOptions::default()).unwrap();
    let alg = TensorAlgebra::new(3, 12);
    for dir in sample_directions(3, 100) {
        for (i, pk) in sol.p.iter().enumerate() {
            let v = pk * alg.basis(i + 1).eval(dir.as_slice()).unwrap();
            assert!(v.norm() <= norm2(pk) * (1.0 + 1e-12));
        }
        let w = Window::tail(12);
        let rd = directional_radius(&alg, &sol.p, dir.as_slice(), w).unwrap();
        assert!(rd >= spherical_radius(&sol.p, w).unwrap() * (1.0 - 1e-12));
    }
}

/// Moving the window down by two orders changes r* by less than 10%.
#[test]
fn radius_estimate_is_window_robust() {
    for name in ["f8.json", "example51.json"] {
        let model = fixture(name);
        let sol = solve_model(&model, 30, &SolveOptions::default()).unwrap();
        let base = spherical_radius(&sol.p, Window::tail(30)).unwrap();
        let shifted = spherical_radius(&sol.p, Window { lo: 19, hi: 28 }).unwrap();
        assert!((shifted - base).abs() < 0.1 * base, "{name}: {base} vs {shifted}");
    }
}

#[test]
fn value_matches_cost_better_with_order() {
    let model = fixture("example51.json");
    let sol = solve_model(&model, 10, &SolveOptions::default()).unwrap();
    let x0 = [-0.6, -0.4, 0.2];
    let mismatch = |k: usize| {
        let ctrl = Controller::new(&model, &sol, k).unwrap();
        let traj = nlreg::controller::simulate(&model, &ctrl, &x0, 200.0, &Default::default()).unwrap();
        nlreg::controller::check_value_decay(&ctrl, &traj, 1e-9).relative_cost_mismatch
    };
    let (m5, m10) = (mismatch(5), mismatch(10));
    assert!(m10 < m5, "{m5:.3e} then {m10:.3e}");
    assert!(m5 < 5e-2 && m10 < 5e-3, "{m5:.3e}, {m10:.3e}");
}

#[test]
fn saturating_value_decays_along_trajectory() {
    let model = fixture("f8_constrained.json");
    let sol = solve_model(&model, 7, &SolveOptions::default()).unwrap();
    let ctrl = Controller::new(&model, &sol, 7).unwrap();
    let traj = nlreg::controller::simulate(&model, &ctrl, &[0.15, 0.0, 0.0], 300.0, &Default::default()).unwrap();
    let rep = nlreg::controller::check_value_decay(&ctrl, &traj, 1e-9);
    assert!(rep.max_dvdt <= 0.0, "{rep:?}");
}

