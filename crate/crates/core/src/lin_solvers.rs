//! Dense kernels for the recursion: Lyapunov and Riccati solves, the SPD
//! square root, definiteness and stabilizability tests, and the per-order
//! operator `M_k = K_k (I ⊗ F_cᵀ) K_kᵀ`.

use nalgebra::{Complex, DMatrix, DVector, LU, SVD};
use thiserror::Error;

use crate::monomial_tensor::TensorAlgebra;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinError {
    #[error("matrix is not Hurwitz (spectral abscissa {0:.3e}); the Lyapunov equation has no stabilizing solution")]
    NotHurwitz(f64),
    #[error("(F1, G0) is not stabilizable")]
    NotStabilizable,
    #[error("Newton-Kleinman did not converge in {iterations} iterations (last step {last_step:.3e})")]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("Riccati residual {0:.3e} above tolerance")]
    Residual(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("matrix is not symmetric (asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("singular linear system")]
    Singular,
    #[error("M_{k} is numerically singular (inverse norm {inv_norm:.3e}); apply the conditioning transform")]
    Conditioning { k: usize, inv_norm: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    a.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < 0.0
}

pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).norm() / a.norm().max(f64::MIN_POSITIVE)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Positive semidefinite up to a scale-relative slack.
pub fn is_psd(a: &DMatrix<f64>) -> bool {
    let scale = a.norm().max(1.0);
    min_eigenvalue_sym(a) >= -1e-12 * scale
}

/// Spectral norm.
pub fn norm2(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SVD::new(a.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Solves `AᵀP + PA + C = 0` through the vectorized `n² × n²` system.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LinError> {
    let n = a.nrows();
    if a.shape() != (n, n) || c.shape() != (n, n) {
        return Err(LinError::Shape(format!(
            "Lyapunov needs square A and C of equal size, got {:?} and {:?}",
            a.shape(),
            c.shape()
        )));
    }
    let abscissa = spectral_abscissa(a);
    if abscissa >= 0.0 {
        return Err(LinError::NotHurwitz(abscissa));
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(c.as_slice());
    let sol = op.lu().solve(&rhs).ok_or(LinError::Singular)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(if asymmetry(c) < 1e-14 { symmetrize(&p) } else { p })
}

/// `‖AᵀP + PA + C‖_F`.
pub fn lyapunov_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    (a.transpose() * p + p * a + c).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreResult {
    pub p1: DMatrix<f64>,
    /// Frobenius norm of the Riccati residual.
    pub residual: f64,
    /// `F₁ − G₀R₁⁻¹G₀ᵀP₁`
    pub fc: DMatrix<f64>,
    /// `κ = R₁⁻¹G₀ᵀP₁`
    pub gain: DMatrix<f64>,
    pub iterations: usize,
}

pub const ARE_STEP_TOL: f64 = 1e-12;
pub const ARE_MAX_ITER: usize = 100;

pub fn riccati_residual(
    f1: &DMatrix<f64>,
    g0: &DMatrix<f64>,
    q1: &DMatrix<f64>,
    r1_inv: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    (f1.transpose() * p + p * f1 + q1 - p * g0 * r1_inv * g0.transpose() * p).norm()
}

/// Stabilizing ARE solution by Newton-Kleinman iteration.
pub fn solve_are(
    f1: &DMatrix<f64>,
    g0: &DMatrix<f64>,
    q1: &DMatrix<f64>,
    r1: &DMatrix<f64>,
) -> Result<AreResult, LinError> {
    let n = f1.nrows();
    let m = g0.ncols();
    if f1.shape() != (n, n) || g0.nrows() != n || q1.shape() != (n, n) || r1.shape() != (m, m) {
        return Err(LinError::Shape("inconsistent ARE data".into()));
    }
    let r_min = min_eigenvalue_sym(r1);
    if r_min <= 0.0 {
        return Err(LinError::NotPositiveDefinite(r_min));
    }
    let r_inv = r1.clone().try_inverse().ok_or(LinError::Singular)?;
    let mut gain = stabilizing_seed(f1, g0, &r_inv)?;

    let mut p_prev: Option<DMatrix<f64>> = None;
    let mut last_step = f64::INFINITY;
    for it in 1..=ARE_MAX_ITER {
        let closed = f1 - g0 * &gain;
        let c = q1 + gain.transpose() * r1 * &gain;
        let p = solve_lyapunov(&closed, &symmetrize(&c))?;
        gain = &r_inv * g0.transpose() * &p;
        if let Some(prev) = &p_prev {
            last_step = (&p - prev).norm();
            if last_step <= ARE_STEP_TOL * p.norm() || last_step == 0.0 {
                let fc = f1 - g0 * &gain;
                let residual = riccati_residual(f1, g0, q1, &r_inv, &p);
                if residual > 1e-10 * (1.0 + p.norm()) {
                    return Err(LinError::Residual(residual));
                }
                if !is_hurwitz(&fc) {
                    return Err(LinError::NotStabilizable);
                }
                return Ok(AreResult {
                    p1: p,
                    residual,
                    fc,
                    gain,
                    iterations: it,
                });
            }
        }
        p_prev = Some(p);
    }
    Err(LinError::NoConvergence {
        iterations: ARE_MAX_ITER,
        last_step,
    })
}

/// Stabilizing gain by eigenvalue shifting: with `β` beyond the spectrum and
/// `(A+βI)Z + Z(A+βI)ᵀ = 2BR⁻¹Bᵀ`, the gain `R⁻¹BᵀZ⁻¹` places the
/// closed-loop spectrum on `Re λ = −β`.
fn stabilizing_seed(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinError> {
    let n = a.nrows();
    let m = b.ncols();
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(m, n));
    }
    let beta = norm2(a) + 1.0;
    let shifted = -(a + DMatrix::identity(n, n) * beta).transpose();
    let w = b * r_inv * b.transpose() * 2.0;
    let z = solve_lyapunov(&shifted, &w)?;
    let z_scale = z.norm().max(f64::MIN_POSITIVE);
    for delta in [0.0, 1e-10, 1e-7] {
        let reg = &z + DMatrix::identity(n, n) * (delta * z_scale);
        if let Some(z_inv) = reg.try_inverse() {
            let gain = r_inv * b.transpose() * z_inv;
            if gain.iter().all(|v| v.is_finite()) && is_hurwitz(&(a - b * &gain)) {
                return Ok(gain);
            }
        }
    }
    Err(LinError::NotStabilizable)
}

/// PBH test: every eigenvalue with `Re λ ≥ 0` must keep `[λI − A, B]` at full rank.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let scale = a.norm().max(b.norm()).max(1.0);
    for lambda in eigenvalues(a) {
        if lambda.re < 0.0 {
            continue;
        }
        // real embedding of the complex matrix X + iY as [[X, −Y], [Y, X]]
        let mut x = DMatrix::zeros(n, n + m);
        let mut y = DMatrix::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                x[(i, j)] = -a[(i, j)];
            }
            x[(i, i)] += lambda.re;
            y[(i, i)] = lambda.im;
            for j in 0..m {
                x[(i, n + j)] = b[(i, j)];
            }
        }
        let mut real = DMatrix::zeros(2 * n, 2 * (n + m));
        real.view_mut((0, 0), (n, n + m)).copy_from(&x);
        real.view_mut((0, n + m), (n, n + m)).copy_from(&(-&y));
        real.view_mut((n, 0), (n, n + m)).copy_from(&y);
        real.view_mut((n, n + m), (n, n + m)).copy_from(&x);
        let sv = SVD::new(real, false, false).singular_values;
        let tol = 1e-10 * scale;
        let rank = sv.iter().filter(|&&s| s > tol).count();
        if rank < 2 * n {
            return false;
        }
    }
    true
}

/// Principal square root of an SPD matrix via its eigendecomposition.
pub fn sqrt_spd(p: &DMatrix<f64>) -> Result<DMatrix<f64>, LinError> {
    let asym = asymmetry(p);
    if asym > 1e-10 {
        return Err(LinError::NotSymmetric(asym));
    }
    let eig = symmetrize(p).symmetric_eigen();
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin <= 0.0 {
        return Err(LinError::NotPositiveDefinite(lmin));
    }
    let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())))
}

/// Above this size `‖M_k⁻¹‖` is estimated by power iteration instead of an SVD.
pub const EXACT_INV_NORM_LIMIT: usize = 2000;

/// How `‖M_k⁻¹‖` is measured when building the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseNorm {
    /// SVD up to [`EXACT_INV_NORM_LIMIT`], power iteration above.
    Auto,
    /// Power iteration on `(MᵀM)⁻¹` regardless of size.
    Estimate,
    Skip,
}

/// `M_k = K_k (I ⊗ F_cᵀ) K_kᵀ` with its LU factorization.
#[derive(Debug, Clone)]
pub struct MkOperator {
    k: usize,
    matrix: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    inv_norm: Option<f64>,
}

pub fn mk_matrix(alg: &TensorAlgebra, fc: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    alg.reducer_k(k).sandwich_identity(&fc.transpose())
}

pub fn build_mk(
    alg: &TensorAlgebra,
    fc: &DMatrix<f64>,
    k: usize,
    norm_mode: InverseNorm,
) -> Result<MkOperator, LinError> {
    let matrix = mk_matrix(alg, fc, k);
    let lu = matrix.clone().lu();
    if !lu.is_invertible() {
        return Err(LinError::Conditioning {
            k,
            inv_norm: f64::INFINITY,
        });
    }
    let inv_norm = match norm_mode {
        InverseNorm::Skip => None,
        InverseNorm::Auto if matrix.nrows() <= EXACT_INV_NORM_LIMIT => {
            let sv = SVD::new(matrix.clone(), false, false).singular_values;
            let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
            Some(if smin > 0.0 { 1.0 / smin } else { f64::INFINITY })
        }
        _ => Some(estimate_inverse_norm(&matrix, &lu)),
    };
    if let Some(v) = inv_norm {
        let scale = matrix.norm().max(f64::MIN_POSITIVE);
        if !v.is_finite() || v * scale > 1e14 {
            return Err(LinError::Conditioning { k, inv_norm: v });
        }
    }
    Ok(MkOperator {
        k,
        matrix,
        lu,
        inv_norm,
    })
}

fn estimate_inverse_norm(matrix: &DMatrix<f64>, lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let lu_t = matrix.transpose().lu();
    let dim = matrix.nrows();
    // fixed xorshift start keeps runs reproducible
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut v = DVector::from_fn(dim, |_, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..60 {
        let Some(y) = lu.solve(&v) else {
            return f64::INFINITY;
        };
        let Some(z) = lu_t.solve(&y) else {
            return f64::INFINITY;
        };
        let nz = z.norm();
        let next = nz.sqrt();
        v = z / nz;
        if (next - estimate).abs() <= 1e-10 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

impl MkOperator {
    pub fn order(&self) -> usize {
        self.k
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse_norm(&self) -> Option<f64> {
        self.inv_norm
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinError> {
        if rhs.len() != self.matrix.nrows() {
            return Err(LinError::Shape(format!(
                "rhs of length {} for M_{} of size {}",
                rhs.len(),
                self.k,
                self.matrix.nrows()
            )));
        }
        self.lu.solve(rhs).ok_or(LinError::Conditioning {
            k: self.k,
            inv_norm: f64::INFINITY,
        })
    }

    /// `‖M·sol − rhs‖ / ‖rhs‖` (zero for a zero right-hand side).
    pub fn backward_error(&self, sol: &DVector<f64>, rhs: &DVector<f64>) -> f64 {
        let r = (&self.matrix * sol - rhs).norm();
        let s = rhs.norm();
        if s == 0.0 {
            r
        } else {
            r / s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_scalar_balance() {
        let a = -DMatrix::identity(3, 3);
        let p = solve_lyapunov(&a, &DMatrix::identity(3, 3)).unwrap();
        assert!((p - DMatrix::identity(3, 3) * 0.5).norm() < 1e-15);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 0.0, -1.0]);
        assert!(matches!(
            solve_lyapunov(&a, &DMatrix::identity(2, 2)),
            Err(LinError::NotHurwitz(_))
        ));
    }

    #[test]
    fn zero_cost_on_stable_plant_gives_zero_value() {
        let f1 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let g0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let are = solve_are(&f1, &g0, &DMatrix::zeros(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert!(are.p1.norm() < 1e-14);
    }

    #[test]
    fn sqrt_of_scaled_identity() {
        let t = sqrt_spd(&(DMatrix::identity(3, 3) * 4.0)).unwrap();
        assert!((t - DMatrix::identity(3, 3) * 2.0).norm() < 1e-14);
        assert!(matches!(
            sqrt_spd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])),
            Err(LinError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn pbh_detects_unstabilizable_mode() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(!is_stabilizable(&a, &b));
        let b2 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(is_stabilizable(&a, &b2));
        // oscillatory unstable pair reached by the input
        let osc = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -1.0, 0.1]);
        assert!(is_stabilizable(&osc, &b));
    }

    #[test]
    fn are_for_stabilizable_but_uncontrollable_pair() {
        // the uncontrollable mode at -2 is stable
        let f1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, -2.0]);
        let g0 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let are = solve_are(&f1, &g0, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert!(is_hurwitz(&are.fc));
        assert!(are.residual < 1e-10 * (1.0 + are.p1.norm()));
    }

    #[test]
    fn mk_for_negative_identity() {
        let alg = TensorAlgebra::new(3, 6);
        for k in 2..5 {
            let op = build_mk(&alg, &(-DMatrix::identity(3, 3)), k, InverseNorm::Auto).unwrap();
            let m = alg.m(k + 1);
            assert!((op.matrix() + DMatrix::identity(m, m)).norm() < 1e-13);
            assert!((op.inverse_norm().unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_iteration_agrees_with_svd() {
        let alg = TensorAlgebra::new(2, 12);
        let fc = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -10.05, -11.095]);
        let exact = build_mk(&alg, &fc, 10, InverseNorm::Auto).unwrap();
        let est = build_mk(&alg, &fc, 10, InverseNorm::Estimate).unwrap();
        let (a, b) = (exact.inverse_norm().unwrap(), est.inverse_norm().unwrap());
        assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
    }
}
