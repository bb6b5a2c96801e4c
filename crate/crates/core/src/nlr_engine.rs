//! Order-by-order solution of the HJB equation for `V_x = Σ P_k x^k`, the
//! optional conditioning change of coordinates, and an independent residual
//! check of the result.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{algebra_for, expand_model, CostModel, Model, ModelError, Penalty, SystemModel};
use crate::lin_solvers::{
    build_mk, max_eigenvalue_sym, min_eigenvalue_sym, solve_are, solve_lyapunov, sqrt_spd, AreResult,
    InverseNorm, LinError, MkOperator,
};
use crate::monomial_tensor::{unvec, TensorAlgebra};
use crate::power_series::{dot_coefficient, matrix_series_dot, series_dot, PowerSeries, SeriesError};

/// Default bound on `α` before the conditioning transform is applied.
pub const DEFAULT_ALPHA_MAX: f64 = 50.0;

/// Default relative tolerance of the residual verifier.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-8;

/// Highest supported truncation order.
pub const MAX_ORDER: usize = 60;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Riccati equation: {0}")]
    Are(LinError),
    #[error("conditioning transform: {0}")]
    Conditioning(LinError),
    #[error("order {0} is outside 1..={MAX_ORDER}")]
    Order(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub alpha_max: f64,
    /// When false the recursion always runs in the original coordinates.
    pub allow_transform: bool,
    pub inverse_norm: InverseNorm,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            alpha_max: DEFAULT_ALPHA_MAX,
            allow_transform: true,
            inverse_norm: InverseNorm::Auto,
        }
    }
}

/// A model expanded to the series order the recursion and verifier need.
#[derive(Debug)]
pub struct Problem {
    pub order: usize,
    pub alg: TensorAlgebra,
    pub sys: SystemModel,
    pub cost: CostModel,
}

impl Problem {
    /// Expands through order `k̄ + 2`: the recursion uses `k̄ + 1`, the
    /// verifier's tail estimate one more.
    pub fn new(model: &Model, order: usize) -> Result<Self, EngineError> {
        if order == 0 || order > MAX_ORDER {
            return Err(EngineError::Order(order));
        }
        let alg = algebra_for(model.n, order)?;
        let (sys, cost) = expand_model(model, &alg, order + 2)?;
        Ok(Self { order, alg, sys, cost })
    }

    pub fn solve_are(&self) -> Result<AreResult, EngineError> {
        solve_are(&self.sys.f1(), &self.sys.g0(), &self.cost.q1, &self.cost.r1()).map_err(EngineError::Are)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderDiagnostics {
    pub k: usize,
    /// `‖M_k⁻¹‖` in the coordinates the recursion ran in.
    pub inv_norm: Option<f64>,
    /// `‖M_k p_k − rhs‖ / ‖rhs‖`
    pub backward_error: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFailure {
    pub k: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Identity unless the transform was applied.
    pub t: DMatrix<f64>,
    pub transformed: bool,
    /// Bound on `‖M_k⁻¹‖`; `None` when `F_c` is not negative definite and no
    /// transform was applied.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub are_iterations: usize,
    pub are_residual: f64,
    /// `κ = R₁⁻¹G₀ᵀP₁` in original coordinates.
    pub gain: DMatrix<f64>,
    /// Closed-loop linear part in original coordinates.
    pub fc: DMatrix<f64>,
    pub orders: Vec<OrderDiagnostics>,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlrSolution {
    pub n: usize,
    pub m: usize,
    /// Requested truncation order `k̄`.
    pub order: usize,
    /// `P_1..P_j` in original coordinates (`p[0] = P_1`); shorter than
    /// `order` after a per-order failure.
    pub p: Vec<DMatrix<f64>>,
    pub conditioning: Conditioning,
    pub diagnostics: Diagnostics,
    pub failure: Option<OrderFailure>,
}

impl NlrSolution {
    /// Highest order actually computed.
    pub fn solved_order(&self) -> usize {
        self.p.len()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.p.len() == self.order
    }

    /// `V_x` as an `n`-row series with `[V_x]_k = P_k`.
    pub fn gradient_series(&self, alg: &TensorAlgebra) -> PowerSeries {
        gradient_series(alg, &self.p)
    }
}

fn gradient_series(alg: &TensorAlgebra, p: &[DMatrix<f64>]) -> PowerSeries {
    let mut coeffs = vec![DMatrix::zeros(alg.n(), 1)];
    coeffs.extend(p.iter().cloned());
    PowerSeries::from_coeffs(alg, coeffs).expect("coefficient shapes follow the algebra")
}

/// `Ψ(v)` at exactly order `k` for a `v` with zero constant term.
fn psi_coefficient(
    alg: &TensorAlgebra,
    penalty: &Penalty,
    v: &PowerSeries,
    k: usize,
) -> Result<DMatrix<f64>, SeriesError> {
    match penalty {
        Penalty::Quadratic { .. } => {
            let w = v.left_mul(&penalty.r1_inv())?;
            Ok(dot_coefficient(alg, v, &w, k)? * 0.5)
        }
        Penalty::Saturating { .. } => Ok(penalty.psi_series(alg, v, k)?.coeff(k).clone()),
    }
}

/// One step of the recursion: `P_k` from `P_1..P_{k−1}` and a factored `M_k`.
pub fn solve_order_k(
    prob: &Problem,
    mk: &MkOperator,
    prior: &[DMatrix<f64>],
    k: usize,
) -> Result<(DMatrix<f64>, f64), String> {
    assert!(k >= 2 && prior.len() == k - 1, "P_1..P_(k-1) are required");
    let alg = &prob.alg;
    let h = gradient_series(alg, prior);
    let fh = dot_coefficient(alg, &prob.sys.f, &h, k + 1).map_err(|e| e.to_string())?;
    let v = matrix_series_dot(alg, &prob.sys.g, &h, k).map_err(|e| e.to_string())?;
    let psi = psi_coefficient(alg, &prob.cost.penalty, &v, k + 1).map_err(|e| e.to_string())?;
    let q = prob.cost.q_reduced(k);
    let rhs = DVector::from_iterator(q.len(), (0..q.len()).map(|i| psi[(0, i)] - fh[(0, i)] - q[i]));
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite right-hand side at order {k}"));
    }
    let p = mk.solve(&rhs).map_err(|e| e.to_string())?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite coefficients at order {k}"));
    }
    let backward = mk.backward_error(&p, &rhs);
    let vec_p = alg.reducer_k(k).apply_transpose(p.as_slice());
    let pk = unvec(vec_p.as_slice(), alg.n(), alg.m(k)).expect("reducer shapes are consistent");
    Ok((pk, backward))
}

/// Runs the recursion in the problem's own coordinates.
///
/// A failure at order `k` keeps `P_1..P_{k−1}` and records the failure.
pub fn solve_nlr(prob: &Problem, are: &AreResult, opts: &SolveOptions) -> NlrSolution {
    let start = Instant::now();
    let mut p = vec![are.p1.clone()];
    let mut orders = Vec::new();
    let mut failure = None;
    let mut warnings = Vec::new();
    for k in 2..=prob.order {
        let t0 = Instant::now();
        let step = build_mk(&prob.alg, &are.fc, k, opts.inverse_norm)
            .map_err(|e| e.to_string())
            .and_then(|mk| solve_order_k(prob, &mk, &p, k).map(|(pk, be)| (pk, be, mk.inverse_norm())));
        match step {
            Ok((pk, backward_error, inv_norm)) => {
                p.push(pk);
                orders.push(OrderDiagnostics {
                    k,
                    inv_norm,
                    backward_error,
                    wall_seconds: t0.elapsed().as_secs_f64(),
                });
            }
            Err(message) => {
                warnings.push(format!(
                    "order {k} failed ({message}); solution kept through order {}",
                    k - 1
                ));
                failure = Some(OrderFailure { k, message });
                break;
            }
        }
    }
    NlrSolution {
        n: prob.sys.n,
        m: prob.sys.m,
        order: prob.order,
        p,
        conditioning: Conditioning {
            t: DMatrix::identity(prob.sys.n, prob.sys.n),
            transformed: false,
            alpha: None,
        },
        diagnostics: Diagnostics {
            are_iterations: are.iterations,
            are_residual: are.residual,
            gain: are.gain.clone(),
            fc: are.fc.clone(),
            orders,
            warnings,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        failure,
    }
}

/// Decides whether the change of coordinates `y = T x` is needed and builds it.
///
/// With `F̄_c = −½(F_c + F_cᵀ)`: if `F̄_c ≻ 0` and `1/λ_min(F̄_c) ≤ alpha_max`
/// nothing changes. Otherwise `T = √P_c` with `F_cᵀP_c + P_cF_c + I = 0`,
/// after which `α = 2 λ_max(P_c)`.
pub fn condition_and_transform(fc: &DMatrix<f64>, alpha_max: f64) -> Result<Conditioning, LinError> {
    let n = fc.nrows();
    let fbar = -(fc + fc.transpose()) * 0.5;
    let lmin = min_eigenvalue_sym(&fbar);
    if lmin > 0.0 && 1.0 / lmin <= alpha_max {
        return Ok(Conditioning {
            t: DMatrix::identity(n, n),
            transformed: false,
            alpha: Some(1.0 / lmin),
        });
    }
    let pc = solve_lyapunov(fc, &DMatrix::identity(n, n))?;
    let t = sqrt_spd(&pc)?;
    Ok(Conditioning {
        t,
        transformed: true,
        alpha: Some(2.0 * max_eigenvalue_sym(&pc)),
    })
}

/// Maps coefficients computed in `y = T x` back: `P_k = Tᵀ P̂_k T_k` with
/// `(T x)^k = T_k x^k`, so that `V(x) = V̂(T x)`.
pub fn transform_solution_back(alg: &TensorAlgebra, p_hat: &[DMatrix<f64>], t: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    p_hat
        .iter()
        .enumerate()
        .map(|(i, ph)| {
            let k = i + 1;
            t.transpose() * ph * alg.reduced_power(t, k)
        })
        .collect()
}

/// Full pipeline: expand, solve the Riccati equation, condition, recurse,
/// and express the result in original coordinates.
pub fn solve_model(model: &Model, order: usize, opts: &SolveOptions) -> Result<NlrSolution, EngineError> {
    let start = Instant::now();
    let prob = Problem::new(model, order)?;
    let are = prob.solve_are()?;
    let cond = if opts.allow_transform {
        condition_and_transform(&are.fc, opts.alpha_max).map_err(EngineError::Conditioning)?
    } else {
        let fbar = -(&are.fc + are.fc.transpose()) * 0.5;
        let lmin = min_eigenvalue_sym(&fbar);
        Conditioning {
            t: DMatrix::identity(model.n, model.n),
            transformed: false,
            alpha: (lmin > 0.0).then(|| 1.0 / lmin),
        }
    };
    let mut sol = if cond.transformed {
        let tmodel = model.transformed(&cond.t)?;
        let tprob = Problem::new(&tmodel, order)?;
        let tare = tprob.solve_are()?;
        let mut sol = solve_nlr(&tprob, &tare, opts);
        sol.p = transform_solution_back(&prob.alg, &sol.p, &cond.t);
        sol.diagnostics.gain = are.gain.clone();
        sol.diagnostics.fc = are.fc.clone();
        sol
    } else {
        solve_nlr(&prob, &are, opts)
    };
    sol.conditioning = cond;
    sol.diagnostics.wall_seconds = start.elapsed().as_secs_f64();
    Ok(sol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualOrder {
    pub order: usize,
    pub max_abs: f64,
    /// Largest coefficient among `V_xᵀf`, `Ψ(gᵀV_x)` and `Q` at this order.
    pub scale: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbResidualReport {
    /// Orders `2..=k̄+1`.
    pub orders: Vec<ResidualOrder>,
    /// Order `k̄ + 2`, where the truncation is expected to show.
    pub tail: Option<ResidualOrder>,
}

impl HjbResidualReport {
    pub fn max_relative(&self) -> f64 {
        self.orders.iter().map(|r| r.relative).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.orders.iter().all(|r| r.relative <= tol)
    }
}

/// Re-expands `V_xᵀf − Ψ(gᵀV_x) + Q` from the coefficients alone and reports
/// each order's largest coefficient.
///
/// Relative figures divide by the largest contributing coefficient at that
/// order, floored at `1e-12` of the order-2 scale so that orders where every
/// term vanishes are not divided by roundoff.
pub fn verify_hjb(prob: &Problem, p: &[DMatrix<f64>]) -> HjbResidualReport {
    let alg = &prob.alg;
    let k_bar = p.len();
    let top = (k_bar + 2).min(prob.sys.order()).min(alg.max_order());
    let h = gradient_series(alg, p).padded(alg, top);
    let fh = series_dot(alg, &prob.sys.f, &h, top).expect("shapes follow the algebra");
    let v = matrix_series_dot(alg, &prob.sys.g, &h, top).expect("shapes follow the algebra");
    let psi = prob
        .cost
        .penalty
        .psi_series(alg, &v, top)
        .expect("v has zero constant term");
    let q = &prob.cost.q;
    let mut rows = Vec::new();
    let mut floor = 0.0;
    for j in 2..=top {
        let res = fh.coeff(j) - psi.coeff(j) + q.coeff(j);
        let scale = fh.coeff(j).amax().max(psi.coeff(j).amax()).max(q.coeff(j).amax());
        if j == 2 {
            floor = 1e-12 * scale.max(f64::MIN_POSITIVE);
        }
        let max_abs = res.amax();
        let denom = scale.max(floor);
        rows.push(ResidualOrder {
            order: j,
            max_abs,
            scale,
            relative: if max_abs == 0.0 { 0.0 } else { max_abs / denom },
        });
    }
    let tail = if top == k_bar + 2 { rows.pop() } else { None };
    HjbResidualReport { orders: rows, tail }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelFile;

    fn model(json: &str) -> Model {
        let file: ModelFile = serde_json::from_str(json).unwrap();
        Model::from_file(&file).unwrap()
    }

    fn scalar() -> Model {
        model(
            r#"{"n": 1, "m": 1, "dynamics": ["x1^2 + u1"], "Q": "x1^2",
                "penalty": {"kind": "quadratic", "R1": [[2]]}, "order": 5}"#,
        )
    }

    #[test]
    fn scalar_recursion_by_hand() {
        // V' = 2x² + 2x√(1+x²) = 2x + 2x² + x³ + 0·x⁴ − x⁵/4 + …
        let sol = solve_model(&scalar(), 5, &SolveOptions::default()).unwrap();
        let want = [2.0, 2.0, 1.0, 0.0, -0.25];
        for (pk, w) in sol.p.iter().zip(want) {
            assert!((pk[(0, 0)] - w).abs() < 1e-12, "{} vs {w}", pk[(0, 0)]);
        }
    }

    #[test]
    fn lqr_degeneracy() {
        let m = model(
            r#"{"n": 2, "m": 1, "dynamics": ["x2", "-x1 + 0.5*x2 + u1"], "Q": "x1^2 + 3*x2^2",
                "penalty": {"kind": "quadratic", "R1": [[0.5]]}, "order": 8}"#,
        );
        let sol = solve_model(&m, 8, &SolveOptions::default()).unwrap();
        assert!(sol.is_complete());
        for pk in &sol.p[1..] {
            assert!(pk.amax() <= 1e-12);
        }
    }

    #[test]
    fn negative_identity_needs_no_transform() {
        let c = condition_and_transform(&(-DMatrix::identity(3, 3)), 50.0).unwrap();
        assert!(!c.transformed);
        assert_eq!(c.alpha, Some(1.0));
        assert_eq!(c.t, DMatrix::identity(3, 3));
    }

    #[test]
    fn transform_makes_closed_loop_negative_definite() {
        let fc = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -10.05, -11.095]);
        let c = condition_and_transform(&fc, 50.0).unwrap();
        assert!(c.transformed);
        let t_inv = c.t.clone().try_inverse().unwrap();
        let fh = &c.t * &fc * t_inv;
        assert!(max_eigenvalue_sym(&(&fh + fh.transpose())) < 0.0);
    }

    #[test]
    fn corrupted_coefficient_shows_in_residual() {
        let m = scalar();
        let prob = Problem::new(&m, 5).unwrap();
        let sol = solve_model(&m, 5, &SolveOptions::default()).unwrap();
        let clean = verify_hjb(&prob, &sol.p);
        assert!(clean.passes(1e-12), "{clean:?}");
        let mut bad = sol.p.clone();
        bad[2][(0, 0)] += 1e-3;
        let report = verify_hjb(&prob, &bad);
        let r4 = report.orders.iter().find(|r| r.order == 4).unwrap();
        assert!(r4.relative > 1e-5);
        assert!(report.orders.iter().filter(|r| r.order < 4).all(|r| r.relative < 1e-12));
    }
}
