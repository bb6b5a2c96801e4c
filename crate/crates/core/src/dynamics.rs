//! Model files, control-affinity extraction and the series expansion of the
//! plant and cost that the recursion consumes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{parse, Expr, ExprError};
use crate::lin_solvers::{is_psd, is_stabilizable, min_eigenvalue_sym};
use crate::monomial_tensor::{unvec, TensorAlgebra};
use crate::power_series::{multi_psi_expand, series_dot, PowerSeries, ScalarSeries, SeriesError};
use crate::univariate::{saturating_psi, UnivariateFn};

/// Largest reduced basis the engine will build (`m_{k̄+1}`).
pub const MAX_BASIS: usize = 10_000;

/// Tolerance on `f(0) = 0` and on the constant/linear part of `Q`.
pub const EQUILIBRIUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{field}: {source}")]
    Expr { field: String, source: ExprError },
    #[error("{0}")]
    Dimension(String),
    #[error("f(0) != 0: component {row} evaluates to {value:.3e} at the origin")]
    Equilibrium { row: usize, value: f64 },
    #[error("running state cost must vanish to second order at the origin: {0}")]
    CostNotFlat(String),
    #[error("quadratic state weight Q1 is not positive semidefinite (smallest eigenvalue {0:.3e})")]
    CostNotPsd(f64),
    #[error("input weight R1 is not positive definite (smallest eigenvalue {0:.3e})")]
    InputWeightNotPd(f64),
    #[error("linearization (F1, G0) is not stabilizable")]
    NotStabilizable,
    #[error("unsupported penalty: {0}")]
    Penalty(String),
    #[error("order {order} needs a basis of {size} monomials (cap {cap})")]
    ResourceCap { order: usize, size: usize, cap: usize },
    #[error("series expansion failed: {0}")]
    Series(#[from] SeriesError),
}

impl ModelError {
    fn expr(field: impl Into<String>, source: ExprError) -> Self {
        ModelError::Expr {
            field: field.into(),
            source,
        }
    }
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    pub m: usize,
    pub dynamics: Vec<String>,
    #[serde(rename = "Q")]
    pub q: String,
    pub penalty: PenaltySpec,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PenaltySpec {
    Quadratic {
        #[serde(rename = "R1")]
        r1: Vec<Vec<f64>>,
    },
    /// `φ(v) = tanh(c·v)/c` per channel; `per_channel` overrides `gain`.
    Tanh {
        gain: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_channel: Option<Vec<f64>>,
    },
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Input penalty `R(u)` described through `φ = ρ⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub enum Penalty {
    /// `R(u) = ½ uᵀR₁u`
    Quadratic { r1: DMatrix<f64> },
    /// `φ_i(v) = tanh(c_i v)/c_i`, so `|u_i| < 1/c_i`.
    Saturating { gains: Vec<f64> },
}

impl Penalty {
    pub fn from_spec(spec: &PenaltySpec, m: usize) -> Result<Self, ModelError> {
        match spec {
            PenaltySpec::Quadratic { r1 } => {
                if r1.len() != m || r1.iter().any(|row| row.len() != m) {
                    return Err(ModelError::Dimension(format!("R1 must be {m}x{m}")));
                }
                let mat = DMatrix::from_fn(m, m, |i, j| r1[i][j]);
                if mat.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::Penalty("R1 has non-finite entries".into()));
                }
                if (&mat - mat.transpose()).amax() > 1e-12 * mat.amax().max(1.0) {
                    return Err(ModelError::Penalty("R1 is not symmetric".into()));
                }
                let lmin = min_eigenvalue_sym(&mat);
                if lmin <= 0.0 {
                    return Err(ModelError::InputWeightNotPd(lmin));
                }
                Ok(Penalty::Quadratic { r1: mat })
            }
            PenaltySpec::Tanh { gain, per_channel } => {
                let gains = match per_channel {
                    Some(g) if g.len() != m => {
                        return Err(ModelError::Dimension(format!(
                            "per_channel has {} gains for {m} inputs",
                            g.len()
                        )))
                    }
                    Some(g) => g.clone(),
                    None => vec![*gain; m],
                };
                if gains.iter().any(|c| !c.is_finite() || *c <= 0.0) {
                    return Err(ModelError::Penalty("tanh gains must be positive and finite".into()));
                }
                Ok(Penalty::Saturating { gains })
            }
        }
    }

    pub fn m(&self) -> usize {
        match self {
            Penalty::Quadratic { r1 } => r1.nrows(),
            Penalty::Saturating { gains } => gains.len(),
        }
    }

    /// Hessian of `R` at zero.
    pub fn r1(&self) -> DMatrix<f64> {
        match self {
            Penalty::Quadratic { r1 } => r1.clone(),
            Penalty::Saturating { gains } => DMatrix::identity(gains.len(), gains.len()),
        }
    }

    /// Hessian of `Ψ` at zero, `R̃₁ = R₁⁻¹`.
    pub fn r1_inv(&self) -> DMatrix<f64> {
        match self {
            Penalty::Quadratic { r1 } => r1
                .clone()
                .try_inverse()
                .expect("R1 was checked positive definite"),
            Penalty::Saturating { gains } => DMatrix::identity(gains.len(), gains.len()),
        }
    }

    /// Per-channel bound on `|u_i|`, if any.
    pub fn limit(&self, i: usize) -> Option<f64> {
        match self {
            Penalty::Quadratic { .. } => None,
            Penalty::Saturating { gains } => Some(1.0 / gains[i]),
        }
    }

    /// `u = −φ(v)`.
    pub fn control(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Penalty::Quadratic { r1 } => -(r1
                .clone()
                .lu()
                .solve(v)
                .expect("R1 was checked positive definite")),
            Penalty::Saturating { gains } => {
                DVector::from_fn(v.len(), |i, _| -(gains[i] * v[i]).tanh() / gains[i])
            }
        }
    }

    /// Running input cost `R(u)`; infinite outside the saturating range.
    /// At the limit itself the saturating cost is finite, `ln 2 / c²`.
    pub fn running_cost(&self, u: &DVector<f64>) -> f64 {
        match self {
            Penalty::Quadratic { r1 } => 0.5 * u.dot(&(r1 * u)),
            Penalty::Saturating { gains } => u
                .iter()
                .zip(gains)
                .map(|(&ui, &c)| {
                    let w = c * ui;
                    if w.abs() > 1.0 {
                        f64::INFINITY
                    } else {
                        UnivariateFn::AtanhIntegral.eval(w) / (c * c)
                    }
                })
                .sum(),
        }
    }

    /// `Ψ(v)` as a series in `x`, given `v(x)` as an `m`-row series.
    pub fn psi_series(
        &self,
        alg: &TensorAlgebra,
        v: &PowerSeries,
        order: usize,
    ) -> Result<ScalarSeries, SeriesError> {
        match self {
            Penalty::Quadratic { .. } => {
                let w = v.left_mul(&self.r1_inv())?;
                Ok(series_dot(alg, v, &w, order)?.scale(0.5))
            }
            Penalty::Saturating { gains } => {
                let psi = psi_from_phi(gains, order);
                multi_psi_expand(alg, &psi, v, order)
            }
        }
    }
}

/// Per-channel coefficients of `ψ_i(v) = ln(cosh(c_i v))/c_i²`, the integral
/// function whose derivative is `φ_i(v) = tanh(c_i v)/c_i`.
pub fn psi_from_phi(gains: &[f64], order: usize) -> Vec<Vec<f64>> {
    gains.iter().map(|&c| saturating_psi(c, order)).collect()
}

/// Parsed, affinity-checked model `ẋ = f(x) + g(x)u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: Option<String>,
    pub n: usize,
    pub m: usize,
    pub f: Vec<Expr>,
    /// `g[i][j]` multiplies `u_j` in `ẋ_i`.
    pub g: Vec<Vec<Expr>>,
    pub q: Expr,
    pub penalty: Penalty,
    pub order: usize,
}

/// Control-affine split of parsed right-hand sides.
pub fn check_affine(dynamics: &[Expr], m: usize) -> Result<(Vec<Expr>, Vec<Vec<Expr>>), ModelError> {
    let mut f = Vec::with_capacity(dynamics.len());
    let mut g = Vec::with_capacity(dynamics.len());
    for (i, e) in dynamics.iter().enumerate() {
        let split = e
            .split_affine(m)
            .map_err(|err| ModelError::expr(format!("dynamics[{}]", i + 1), err))?;
        f.push(split.f.unwrap_or_else(|| Expr::num(0.0)));
        g.push(
            split
                .g
                .into_iter()
                .map(|c| c.unwrap_or_else(|| Expr::num(0.0)))
                .collect(),
        );
    }
    Ok((f, g))
}

impl Model {
    pub fn from_file(file: &ModelFile) -> Result<Self, ModelError> {
        let (n, m) = (file.n, file.m);
        if n == 0 || m == 0 {
            return Err(ModelError::Dimension("n and m must be positive".into()));
        }
        if file.dynamics.len() != n {
            return Err(ModelError::Dimension(format!(
                "{} dynamics expressions for n = {n}",
                file.dynamics.len()
            )));
        }
        let mut parsed = Vec::with_capacity(n);
        for (i, src) in file.dynamics.iter().enumerate() {
            let field = format!("dynamics[{}]", i + 1);
            let e = parse(src).map_err(|err| ModelError::expr(&field, err))?;
            e.check_dims(n, m).map_err(|err| ModelError::expr(&field, err))?;
            parsed.push(e);
        }
        let (f, g) = check_affine(&parsed, m)?;
        let q = parse(&file.q).map_err(|err| ModelError::expr("Q", err))?;
        q.check_dims(n, 0).map_err(|err| ModelError::expr("Q", err))?;
        let penalty = Penalty::from_spec(&file.penalty, m)?;
        Ok(Model {
            name: file.name.clone(),
            n,
            m,
            f,
            g,
            q,
            penalty,
            order: file.order,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_file(&ModelFile::load(path)?)
    }

    pub fn f_eval(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.f[i].eval(x, &[]))
    }

    pub fn g_eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m, |i, j| self.g[i][j].eval(x, &[]))
    }

    pub fn q_eval(&self, x: &[f64]) -> f64 {
        self.q.eval(x, &[])
    }

    /// `ẋ = f(x) + g(x)u`.
    pub fn rhs(&self, x: &[f64], u: &DVector<f64>) -> DVector<f64> {
        self.f_eval(x) + self.g_eval(x) * u
    }

    /// The model in coordinates `y = T x`: `f ← T f(T⁻¹y)`, `g ← T g(T⁻¹y)`,
    /// `Q ← Q(T⁻¹y)`.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Result<Model, ModelError> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| ModelError::Dimension("transform is singular".into()))?;
        let back: Vec<Expr> = (0..self.n)
            .map(|i| {
                let terms: Vec<(f64, Expr)> = (0..self.n).map(|j| (t_inv[(i, j)], Expr::state(j))).collect();
                Expr::linear_combination(&terms)
            })
            .collect();
        let f_sub: Vec<Expr> = self.f.iter().map(|e| e.substitute_states(&back)).collect();
        let g_sub: Vec<Vec<Expr>> = self
            .g
            .iter()
            .map(|row| row.iter().map(|e| e.substitute_states(&back)).collect())
            .collect();
        let mix = |i: usize, items: &dyn Fn(usize) -> Expr| {
            let terms: Vec<(f64, Expr)> = (0..self.n).map(|j| (t[(i, j)], items(j))).collect();
            Expr::linear_combination(&terms)
        };
        let f = (0..self.n).map(|i| mix(i, &|j| f_sub[j].clone())).collect();
        let g = (0..self.n)
            .map(|i| (0..self.m).map(|c| mix(i, &|j| g_sub[j][c].clone())).collect())
            .collect();
        Ok(Model {
            name: self.name.clone(),
            n: self.n,
            m: self.m,
            f,
            g,
            q: self.q.substitute_states(&back),
            penalty: self.penalty.clone(),
            order: self.order,
        })
    }

    /// Canonical text used for hashing: normalized expressions and penalty.
    pub fn canonical_text(&self) -> String {
        let mut s = format!("n={};m={};", self.n, self.m);
        for (i, e) in self.f.iter().enumerate() {
            s.push_str(&format!("f{}={e};", i + 1));
            for (j, gij) in self.g[i].iter().enumerate() {
                s.push_str(&format!("g{}{}={gij};", i + 1, j + 1));
            }
        }
        s.push_str(&format!("Q={};", self.q));
        match &self.penalty {
            Penalty::Quadratic { r1 } => s.push_str(&format!("R1={:?};", r1.as_slice())),
            Penalty::Saturating { gains } => s.push_str(&format!("tanh={gains:?};")),
        }
        s
    }

    /// Hex sha256 of the canonical model plus caller-supplied run settings.
    pub fn digest(&self, settings: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_text().as_bytes());
        h.update(settings.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Series form of the plant up to a fixed order.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub n: usize,
    pub m: usize,
    /// `f(x)` as an `n`-row series; `[f]_k = F_k`.
    pub f: PowerSeries,
    /// Columns `g_1..g_m` of `g(x)`, each an `n`-row series.
    pub g: Vec<PowerSeries>,
    /// `max_i |f_i(0)|`
    pub equilibrium_residual: f64,
    pub stabilizable: bool,
}

impl SystemModel {
    pub fn order(&self) -> usize {
        self.f.order()
    }

    pub fn f_coeff(&self, k: usize) -> &DMatrix<f64> {
        self.f.coeff(k)
    }

    pub fn f1(&self) -> DMatrix<f64> {
        self.f.coeff(1).clone()
    }

    pub fn g0(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m, |i, j| self.g[j].coeff(0)[(i, 0)])
    }

    /// `G_{ik}`: order-`k` coefficient of column `i`.
    pub fn g_coeff(&self, i: usize, k: usize) -> &DMatrix<f64> {
        self.g[i].coeff(k)
    }
}

/// Series form of the running cost.
#[derive(Debug, Clone)]
pub struct CostModel {
    /// `Q(x)` as a scalar series.
    pub q: ScalarSeries,
    /// `Q₁` with `½xᵀQ₁x` the quadratic part.
    pub q1: DMatrix<f64>,
    /// `Q_k` (`n × m_k`) for `k ≥ 2`; index 0 and 1 are empty placeholders.
    pub q_tensors: Vec<DMatrix<f64>>,
    pub penalty: Penalty,
    /// `R̃_k` (`m × m_k` over the input basis); index 0 is empty.
    pub r_tilde: Vec<DMatrix<f64>>,
}

impl CostModel {
    pub fn r1(&self) -> DMatrix<f64> {
        self.penalty.r1()
    }

    pub fn r1_inv(&self) -> DMatrix<f64> {
        self.penalty.r1_inv()
    }

    /// `q_k = [Q]_{k+1}ᵀ` as a column of length `m_{k+1}`.
    pub fn q_reduced(&self, k: usize) -> DVector<f64> {
        if k + 1 > self.q.order() {
            return DVector::zeros(0);
        }
        self.q.coeff(k + 1).row(0).transpose()
    }
}

/// `unvec(K_kᵀ s)` for a reduced order-`k+1` row `s` over an `n`-dimensional basis.
fn tensor_from_row(alg: &TensorAlgebra, k: usize, row: &DMatrix<f64>) -> DMatrix<f64> {
    let kt = alg.reducer_k(k).apply_transpose(row.as_slice());
    unvec(kt.as_slice(), alg.n(), alg.m(k)).expect("reducer shapes are consistent")
}

/// Checks the basis size for a run to order `order` and builds the shared algebra.
///
/// The algebra carries two orders beyond `order` so the residual verifier can
/// look past the last solved order.
pub fn algebra_for(n: usize, order: usize) -> Result<TensorAlgebra, ModelError> {
    let size = crate::monomial_tensor::monomial_count(n, order + 1);
    if size > MAX_BASIS {
        return Err(ModelError::ResourceCap {
            order,
            size,
            cap: MAX_BASIS,
        });
    }
    Ok(TensorAlgebra::new(n, order + 2))
}

/// Expands the model to series order `order` (normally `k̄ + 1` or more) and
/// checks the standing assumptions.
pub fn expand_model(
    model: &Model,
    alg: &TensorAlgebra,
    order: usize,
) -> Result<(SystemModel, CostModel), ModelError> {
    let (n, m) = (model.n, model.m);
    if alg.n() != n {
        return Err(ModelError::Dimension(format!(
            "algebra over {} states for a model with n = {n}",
            alg.n()
        )));
    }
    let origin = vec![0.0; n];
    let mut eq_residual = 0.0f64;
    for (i, e) in model.f.iter().enumerate() {
        let v = e.eval(&origin, &[]);
        if !v.is_finite() || v.abs() > EQUILIBRIUM_TOL {
            return Err(ModelError::Equilibrium { row: i + 1, value: v });
        }
        eq_residual = eq_residual.max(v.abs());
    }

    let f_rows = model
        .f
        .iter()
        .enumerate()
        .map(|(i, e)| e.to_series(alg, order).map_err(|err| ModelError::expr(format!("dynamics[{}]", i + 1), err)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut f = PowerSeries::stack(&f_rows)?;
    // the equilibrium is exact by assumption; drop roundoff in the constant
    f.coeff_mut(0).fill(0.0);

    let g = (0..m)
        .map(|j| {
            let rows = (0..n)
                .map(|i| {
                    model.g[i][j]
                        .to_series(alg, order)
                        .map_err(|err| ModelError::expr(format!("g[{},{}]", i + 1, j + 1), err))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(PowerSeries::stack(&rows)?)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    let q = model.q.to_series(alg, order).map_err(|err| ModelError::expr("Q", err))?;
    let q0 = q.coeff(0)[(0, 0)];
    if q0.abs() > EQUILIBRIUM_TOL {
        return Err(ModelError::CostNotFlat(format!("Q(0) = {q0:.3e}")));
    }
    if order >= 1 {
        let grad = q.coeff(1).amax();
        if grad > EQUILIBRIUM_TOL {
            return Err(ModelError::CostNotFlat(format!("linear part of size {grad:.3e}")));
        }
    }
    let mut q = q;
    q.coeff_mut(0).fill(0.0);
    if order >= 1 {
        q.coeff_mut(1).fill(0.0);
    }

    let q1 = if order >= 2 {
        tensor_from_row(alg, 1, q.coeff(2)) * 2.0
    } else {
        DMatrix::zeros(n, n)
    };
    if !is_psd(&q1) {
        return Err(ModelError::CostNotPsd(min_eigenvalue_sym(&q1)));
    }
    let mut q_tensors = vec![DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    for k in 2..order {
        q_tensors.push(tensor_from_row(alg, k, q.coeff(k + 1)));
    }

    let r_tilde = input_tensors(&model.penalty, order)?;

    let sys = SystemModel {
        n,
        m,
        stabilizable: false,
        equilibrium_residual: eq_residual,
        f,
        g,
    };
    let stabilizable = is_stabilizable(&sys.f1(), &sys.g0());
    if !stabilizable {
        return Err(ModelError::NotStabilizable);
    }
    let sys = SystemModel { stabilizable, ..sys };
    Ok((
        sys,
        CostModel {
            q,
            q1,
            q_tensors,
            penalty: model.penalty.clone(),
            r_tilde,
        },
    ))
}

/// `R̃_k` of `Ψ(v) = ½vᵀR̃₁v + Σ vᵀR̃_k v^k` over the `m`-dimensional input basis.
fn input_tensors(penalty: &Penalty, order: usize) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let m = penalty.m();
    let top = order.max(2);
    let ialg = TensorAlgebra::new(m, top);
    let v = PowerSeries::linear(&ialg, &DMatrix::identity(m, m), top);
    let psi = penalty.psi_series(&ialg, &v, top)?;
    let mut out = vec![DMatrix::zeros(0, 0)];
    for k in 1..top {
        let t = tensor_from_row(&ialg, k, psi.coeff(k + 1));
        out.push(if k == 1 { t * 2.0 } else { t });
    }
    Ok(out)
}
