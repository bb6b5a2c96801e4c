//! Evaluation of the truncated feedback law and closed-loop simulation
//! against the exact model dynamics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{Model, Penalty};
use crate::monomial_tensor::TensorAlgebra;
use crate::nlr_engine::NlrSolution;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("state has non-finite entries")]
    NonFinite,
    #[error("state has {found} components, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("active order {requested} exceeds the {available} solved orders")]
    Order { requested: usize, available: usize },
    #[error("horizon must be positive and finite (got {0})")]
    Horizon(f64),
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e}); the closed loop looks stiff")]
    Stiff { t: f64, h: f64 },
    #[error("step budget of {0} exhausted before the horizon")]
    StepBudget(usize),
    #[error("csv output failed: {0}")]
    Io(#[from] std::io::Error),
}

/// `u(x) = −φ(g(x)ᵀ Σ_{k ≤ k_active} P_k x^k)` with `g` read from the model.
#[derive(Debug)]
pub struct Controller {
    alg: TensorAlgebra,
    p: Vec<DMatrix<f64>>,
    model: Model,
}

impl Controller {
    pub fn new(model: &Model, sol: &NlrSolution, k_active: usize) -> Result<Self, ControllerError> {
        Self::from_coefficients(model, &sol.p, k_active)
    }

    /// Controller from `P_1..P_j` (`p[0] = P_1`), truncated to `k_active`.
    pub fn from_coefficients(
        model: &Model,
        p: &[DMatrix<f64>],
        k_active: usize,
    ) -> Result<Self, ControllerError> {
        if k_active == 0 || k_active > p.len() {
            return Err(ControllerError::Order {
                requested: k_active,
                available: p.len(),
            });
        }
        if p[0].nrows() != model.n {
            return Err(ControllerError::Dimension {
                expected: p[0].nrows(),
                found: model.n,
            });
        }
        Ok(Self {
            alg: TensorAlgebra::new(model.n, k_active),
            p: p[..k_active].to_vec(),
            model: model.clone(),
        })
    }

    pub fn order(&self) -> usize {
        self.p.len()
    }

    pub fn n(&self) -> usize {
        self.model.n
    }

    pub fn m(&self) -> usize {
        self.model.m
    }

    pub fn penalty(&self) -> &Penalty {
        &self.model.penalty
    }

    pub fn p1(&self) -> &DMatrix<f64> {
        &self.p[0]
    }

    fn check(&self, x: &[f64]) -> Result<(), ControllerError> {
        if x.len() != self.model.n {
            return Err(ControllerError::Dimension {
                expected: self.model.n,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ControllerError::NonFinite);
        }
        Ok(())
    }

    /// `V_x(x) = Σ P_k x^k`.
    pub fn gradient(&self, x: &[f64]) -> Result<DVector<f64>, ControllerError> {
        self.check(x)?;
        Ok(self.gradient_unchecked(x))
    }

    fn gradient_unchecked(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.model.n);
        let mut buf = Vec::new();
        for (i, pk) in self.p.iter().enumerate() {
            let basis = self.alg.basis(i + 1);
            buf.resize(basis.len(), 0.0);
            basis.eval_into(x, &mut buf);
            out += pk * DVector::from_column_slice(&buf);
        }
        out
    }

    pub fn eval_control(&self, x: &[f64]) -> Result<DVector<f64>, ControllerError> {
        self.check(x)?;
        Ok(self.control_unchecked(x))
    }

    fn control_unchecked(&self, x: &[f64]) -> DVector<f64> {
        let v = self.model.g_eval(x).transpose() * self.gradient_unchecked(x);
        self.model.penalty.control(&v)
    }

    /// `V(x) = Σ xᵀP_k x^k / (k+1)`.
    pub fn eval_value(&self, x: &[f64]) -> Result<f64, ControllerError> {
        self.check(x)?;
        Ok(self.value_unchecked(x))
    }

    fn value_unchecked(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let mut buf = Vec::new();
        let mut v = 0.0;
        // highest order first so small terms accumulate before large ones
        for (i, pk) in self.p.iter().enumerate().rev() {
            let k = i + 1;
            let basis = self.alg.basis(k);
            buf.resize(basis.len(), 0.0);
            basis.eval_into(x, &mut buf);
            v += xv.dot(&(pk * DVector::from_column_slice(&buf))) / (k + 1) as f64;
        }
        v
    }

    /// `Q(x) + R(u(x))`.
    pub fn running_cost(&self, x: &[f64], u: &DVector<f64>) -> f64 {
        self.model.q_eval(x) + self.model.penalty.running_cost(u)
    }

    /// Closed-loop vector field `f(x) + g(x)u(x)` of the exact model.
    pub fn closed_loop(&self, x: &[f64]) -> DVector<f64> {
        let u = self.control_unchecked(x);
        self.model.rhs(x, &u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// `‖x‖` below this ends the run as converged.
    pub converge_norm: f64,
    /// `‖x‖` above this ends the run as diverged.
    pub diverge_norm: f64,
    pub initial_step: Option<f64>,
    pub max_step: f64,
    pub max_steps: usize,
    /// Add `½xᵀP₁x` at the final state when the run converges.
    pub tail_bound: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            converge_norm: 1e-8,
            diverge_norm: 1e6,
            initial_step: None,
            max_step: f64::INFINITY,
            max_steps: 2_000_000,
            tail_bound: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    Diverged,
    Horizon,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::Diverged => "diverged",
            Termination::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Accumulated `∫(Q + R) dt` at each sample.
    pub running_cost: Vec<f64>,
    pub termination: Termination,
    /// Quadratic estimate of the cost left after the final sample; zero
    /// unless the run converged with the tail bound enabled.
    pub tail_cost: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.x.last().expect("a trajectory holds at least the initial state")
    }

    pub fn integrated_cost(&self) -> f64 {
        *self.running_cost.last().unwrap_or(&0.0)
    }

    pub fn total_cost(&self) -> f64 {
        self.integrated_cost() + self.tail_cost
    }

    pub fn tail_added(&self) -> bool {
        self.tail_cost != 0.0
    }

    /// Largest `|u_i|` over the samples, per channel.
    pub fn max_abs_control(&self) -> Vec<f64> {
        let m = self.u.first().map_or(0, |u| u.len());
        (0..m)
            .map(|i| self.u.iter().map(|u| u[i].abs()).fold(0.0, f64::max))
            .collect()
    }

    /// Columns `t, x1..xn, u1..um, running_cost`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), ControllerError> {
        let n = self.x.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("running_cost".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.t.len() {
            let mut row = vec![format!("{:.12e}", self.t[i])];
            row.extend(self.x[i].iter().map(|v| format!("{v:.12e}")));
            // + 0.0 turns a negative zero control into 0
            row.extend(self.u[i].iter().map(|v| format!("{:.12e}", v + 0.0)));
            row.push(format!("{:.12e}", self.running_cost[i]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

// Dormand-Prince 5(4) tableau; the field is autonomous so the nodes are unused.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Augmented field `(ẋ, Q + R)` with the control that produced it.
fn augmented(ctrl: &Controller, model: &Model, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = model.n;
    let x = &z.as_slice()[..n];
    let u = ctrl.control_unchecked(x);
    let xdot = model.rhs(x, &u);
    let mut dz = DVector::zeros(n + 1);
    dz.rows_mut(0, n).copy_from(&xdot);
    dz[n] = model.q_eval(x) + model.penalty.running_cost(&u);
    (dz, u)
}

/// Integrates `ẋ = f(x) + g(x)u(x)` of `model` (the exact expressions, not
/// their truncation) together with the running cost, using adaptive
/// Dormand-Prince steps.
pub fn simulate(
    model: &Model,
    ctrl: &Controller,
    x0: &[f64],
    horizon: f64,
    opts: &SimOptions,
) -> Result<Trajectory, ControllerError> {
    ctrl.check(x0)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(ControllerError::Horizon(horizon));
    }
    let n = model.n;
    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from_slice(x0);
    let (mut k1, u0) = augmented(ctrl, model, &z);

    let mut traj = Trajectory {
        t: vec![0.0],
        x: vec![DVector::from_column_slice(x0)],
        u: vec![u0],
        running_cost: vec![0.0],
        termination: Termination::Horizon,
        tail_cost: 0.0,
    };
    let finish = |mut traj: Trajectory, term: Termination| {
        traj.termination = term;
        if term == Termination::Converged && opts.tail_bound {
            let x = traj.final_state();
            traj.tail_cost = 0.5 * x.dot(&(ctrl.p1() * x));
        }
        traj
    };
    let xnorm = |z: &DVector<f64>| z.rows(0, n).norm();
    if xnorm(&z) < opts.converge_norm {
        return Ok(finish(traj, Termination::Converged));
    }

    let err_norm = |z: &DVector<f64>, zn: &DVector<f64>, e: &DVector<f64>| {
        let mut acc = 0.0;
        for i in 0..z.len() {
            let sc = opts.atol + opts.rtol * z[i].abs().max(zn[i].abs());
            acc += (e[i] / sc).powi(2);
        }
        (acc / z.len() as f64).sqrt()
    };

    let mut h = match opts.initial_step {
        Some(h) => h,
        None => {
            let scale = DVector::from_fn(n + 1, |i, _| opts.atol + opts.rtol * z[i].abs());
            let d0 = z.component_div(&scale).norm() / ((n + 1) as f64).sqrt();
            let d1 = k1.component_div(&scale).norm() / ((n + 1) as f64).sqrt();
            if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }
        }
    }
    .min(horizon)
    .min(opts.max_step);

    let mut t = 0.0;
    let mut steps = 0;
    let mut ks: [DVector<f64>; 7] = std::array::from_fn(|_| DVector::zeros(n + 1));
    let mut prev_err: f64 = 1e-4;
    while t < horizon {
        if steps >= opts.max_steps {
            return Err(ControllerError::StepBudget(opts.max_steps));
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(ControllerError::Stiff { t, h });
        }
        let last = t + h >= horizon;
        if last {
            h = horizon - t;
        }
        ks[0].copy_from(&k1);
        let mut u_new = None;
        for s in 1..7 {
            let mut zs = z.clone();
            for (j, kj) in ks.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    zs.axpy(h * A[s][j], kj, 1.0);
                }
            }
            let (k, u) = augmented(ctrl, model, &zs);
            ks[s] = k;
            if s == 6 {
                u_new = Some(u);
            }
        }
        let mut z5 = z.clone();
        let mut err = DVector::zeros(n + 1);
        for s in 0..7 {
            z5.axpy(h * B5[s], &ks[s], 1.0);
            err.axpy(h * (B5[s] - B4[s]), &ks[s], 1.0);
        }
        let e = err_norm(&z, &z5, &err);
        if !e.is_finite() || z5.iter().any(|v| !v.is_finite()) {
            h *= 0.2;
            continue;
        }
        if e <= 1.0 {
            steps += 1;
            t = if last { horizon } else { t + h };
            z = z5;
            // FSAL: stage 7 was evaluated at the accepted point
            k1 = ks[6].clone();
            traj.t.push(t);
            traj.x.push(z.rows(0, n).into_owned());
            traj.u.push(u_new.expect("seven stages ran"));
            traj.running_cost.push(z[n]);
            let nx = xnorm(&z);
            if nx < opts.converge_norm {
                return Ok(finish(traj, Termination::Converged));
            }
            if nx > opts.diverge_norm {
                return Ok(finish(traj, Termination::Diverged));
            }
            // PI step-size control
            let fac = 0.9 * e.max(1e-10).powf(-0.7 / 5.0) * prev_err.powf(0.4 / 5.0);
            h *= fac.clamp(0.2, 5.0);
            prev_err = e.max(1e-4);
        } else {
            h *= (0.9 * e.powf(-0.2)).max(0.2);
        }
        h = h.min(opts.max_step);
    }
    Ok(finish(traj, Termination::Horizon))
}

/// Consistency of `V` with the simulated closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    /// Number of trajectory samples checked.
    pub samples: usize,
    /// Largest `dV/dt` seen (should be `≤ 0`).
    pub max_dvdt: f64,
    /// Largest `|dV/dt + Q + R|`, relative to `max(Q + R, floor)`.
    pub max_decay_mismatch: f64,
    pub value_at_start: f64,
    pub total_cost: f64,
    /// `|V(x₀) − total cost| / V(x₀)`.
    pub relative_cost_mismatch: f64,
}

/// Compares `dV/dt` along the trajectory with `−(Q + R)` and `V(x₀)` with
/// the accumulated cost. The time derivative is a central difference of `V`
/// along the closed-loop velocity, with a step tied to the integrator
/// tolerance.
pub fn check_value_decay(ctrl: &Controller, traj: &Trajectory, rtol: f64) -> DecayReport {
    let mut max_dvdt = f64::NEG_INFINITY;
    let mut max_mismatch: f64 = 0.0;
    let floor = {
        let x0 = &traj.x[0];
        let c0 = ctrl.running_cost(x0.as_slice(), &traj.u[0]);
        (c0 * 1e-6).max(1e-300)
    };
    let eps = rtol.max(f64::EPSILON).cbrt();
    for (x, u) in traj.x.iter().zip(&traj.u) {
        let xs = x.as_slice();
        let vel = ctrl.closed_loop(xs);
        let speed = vel.norm();
        let dvdt = if speed == 0.0 {
            0.0
        } else {
            let h = eps * x.norm().max(1e-12) / speed;
            let fwd: Vec<f64> = (x + &vel * h).iter().copied().collect();
            let bwd: Vec<f64> = (x - &vel * h).iter().copied().collect();
            (ctrl.value_unchecked(&fwd) - ctrl.value_unchecked(&bwd)) / (2.0 * h)
        };
        let cost = ctrl.running_cost(xs, u);
        max_dvdt = max_dvdt.max(dvdt);
        max_mismatch = max_mismatch.max((dvdt + cost).abs() / cost.max(floor));
    }
    let v0 = ctrl.value_unchecked(traj.x[0].as_slice());
    let total = traj.total_cost();
    DecayReport {
        samples: traj.t.len(),
        max_dvdt,
        max_decay_mismatch: max_mismatch,
        value_at_start: v0,
        total_cost: total,
        relative_cost_mismatch: if v0 != 0.0 {
            (v0 - total).abs() / v0.abs()
        } else {
            total.abs()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelFile;
    use crate::nlr_engine::{solve_model, SolveOptions};

    fn model(json: &str) -> Model {
        let file: ModelFile = serde_json::from_str(json).unwrap();
        Model::from_file(&file).unwrap()
    }

    fn linear() -> Model {
        model(
            r#"{"n":2,"m":1,"dynamics":["x2","-2*x1 - 0.3*x2 + u1"],
                "Q":"x1^2 + 0.5*x1*x2 + x2^2",
                "penalty":{"kind":"quadratic","R1":[[0.5]]},"order":4}"#,
        )
    }

    #[test]
    fn origin_gives_zero_control_and_value() {
        let m = linear();
        let sol = solve_model(&m, 4, &SolveOptions::default()).unwrap();
        let c = Controller::new(&m, &sol, 4).unwrap();
        assert_eq!(c.eval_control(&[0.0, 0.0]).unwrap()[0], 0.0);
        assert_eq!(c.eval_value(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            c.eval_control(&[f64::NAN, 0.0]),
            Err(ControllerError::NonFinite)
        ));
    }

    #[test]
    fn lqr_value_and_control() {
        let m = linear();
        let sol = solve_model(&m, 3, &SolveOptions::default()).unwrap();
        let c = Controller::new(&m, &sol, 1).unwrap();
        let x = [0.3, -0.7];
        let p1 = &sol.p[0];
        let xv = DVector::from_column_slice(&x);
        let want_v = 0.5 * xv.dot(&(p1 * &xv));
        assert!((c.eval_value(&x).unwrap() - want_v).abs() < 1e-14);
        // u = −R₁⁻¹ G₀ᵀ P₁ x with R₁ = 0.5, G₀ = e2
        let want_u = -2.0 * (p1 * &xv)[1];
        assert!((c.eval_control(&x).unwrap()[0] - want_u).abs() < 1e-14);
    }

    #[test]
    fn lqr_cost_matches_value() {
        let m = linear();
        let sol = solve_model(&m, 1, &SolveOptions::default()).unwrap();
        let c = Controller::new(&m, &sol, 1).unwrap();
        let traj = simulate(&m, &c, &[1.0, -0.5], 200.0, &SimOptions::default()).unwrap();
        assert_eq!(traj.termination, Termination::Converged);
        let rep = check_value_decay(&c, &traj, 1e-9);
        assert!(rep.relative_cost_mismatch < 1e-6, "{rep:?}");
        assert!(rep.max_dvdt <= 0.0);
        assert!(traj.running_cost.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_state_stays_put() {
        let m = linear();
        let sol = solve_model(&m, 2, &SolveOptions::default()).unwrap();
        let c = Controller::new(&m, &sol, 2).unwrap();
        let traj = simulate(&m, &c, &[0.0, 0.0], 10.0, &SimOptions::default()).unwrap();
        assert_eq!(traj.t.len(), 1);
        assert_eq!(traj.total_cost(), 0.0);
        assert_eq!(traj.termination, Termination::Converged);
    }

    #[test]
    fn saturated_input_cannot_stop_escape() {
        // |u| ≤ 0.01 cannot hold back x' = x + x² from x = 1
        let m = model(
            r#"{"n":1,"m":1,"dynamics":["x1 + x1^2 + u1"],"Q":"x1^2",
                "penalty":{"kind":"tanh","gain":100},"order":2}"#,
        );
        let sol = solve_model(&m, 2, &SolveOptions::default()).unwrap();
        let c = Controller::new(&m, &sol, 2).unwrap();
        let traj = simulate(&m, &c, &[1.0], 100.0, &SimOptions::default()).unwrap();
        assert_eq!(traj.termination, Termination::Diverged);
        assert!(traj.max_abs_control()[0] <= 0.01);
    }

    #[test]
    fn rejects_bad_order_and_horizon() {
        let m = linear();
        let sol = solve_model(&m, 2, &SolveOptions::default()).unwrap();
        assert!(matches!(
            Controller::new(&m, &sol, 3),
            Err(ControllerError::Order { .. })
        ));
        let c = Controller::new(&m, &sol, 2).unwrap();
        assert!(matches!(
            simulate(&m, &c, &[1.0, 0.0], -1.0, &SimOptions::default()),
            Err(ControllerError::Horizon(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let m = linear();
        let sol = solve_model(&m, 1, &SolveOptions::default()).unwrap();
        let c = Controller::new(&m, &sol, 1).unwrap();
        let traj = simulate(&m, &c, &[0.1, 0.0], 1.0, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,running_cost");
        assert_eq!(lines.count(), traj.t.len());
    }
}
