//! Vector-valued multivariate truncated Taylor series over the lexicographic
//! basis: `s(x) = Σ_k S_k x^k` with `S_k ∈ ℝ^{p×m_k}`.
//!
//! Products are routed through the `K_{i,j}` tables of a shared
//! [`TensorAlgebra`] and truncated eagerly to the requested order.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::monomial_tensor::TensorAlgebra;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeriesError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("composition needs a zero constant term in the inner series, found {0}")]
    NonzeroConstant(f64),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    n: usize,
    p: usize,
    coeffs: Vec<DMatrix<f64>>,
}

/// A power series with a single output row.
pub type ScalarSeries = PowerSeries;

impl PowerSeries {
    pub fn zeros(alg: &TensorAlgebra, p: usize, order: usize) -> Self {
        Self {
            n: alg.n(),
            p,
            coeffs: (0..=order).map(|k| DMatrix::zeros(p, alg.m(k))).collect(),
        }
    }

    /// Series from explicit coefficient matrices `S_0..S_order`.
    pub fn from_coeffs(alg: &TensorAlgebra, coeffs: Vec<DMatrix<f64>>) -> Result<Self, SeriesError> {
        let p = coeffs
            .first()
            .map(|c| c.nrows())
            .ok_or_else(|| SeriesError::Dimension("series needs at least S_0".into()))?;
        for (k, c) in coeffs.iter().enumerate() {
            if c.shape() != (p, alg.m(k)) {
                return Err(SeriesError::Dimension(format!(
                    "coefficient {k} is {}x{}, expected {p}x{}",
                    c.nrows(),
                    c.ncols(),
                    alg.m(k)
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(SeriesError::Domain(format!("coefficient {k} is not finite")));
            }
        }
        Ok(Self {
            n: alg.n(),
            p,
            coeffs,
        })
    }

    pub fn constant(alg: &TensorAlgebra, value: &[f64], order: usize) -> Self {
        let mut s = Self::zeros(alg, value.len(), order);
        s.coeffs[0].copy_from_slice(value);
        s
    }

    /// The scalar series `x_i` (zero-based `i`).
    pub fn variable(alg: &TensorAlgebra, i: usize, order: usize) -> Self {
        assert!(i < alg.n());
        let mut s = Self::zeros(alg, 1, order);
        if order >= 1 {
            s.coeffs[1][(0, i)] = 1.0;
        }
        s
    }

    /// The linear map `x ↦ A x` as a series (`A` is `p × n`).
    pub fn linear(alg: &TensorAlgebra, a: &DMatrix<f64>, order: usize) -> Self {
        assert_eq!(a.ncols(), alg.n());
        let mut s = Self::zeros(alg, a.nrows(), order);
        if order >= 1 {
            s.coeffs[1].copy_from(a);
        }
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, k: usize) -> &DMatrix<f64> {
        &self.coeffs[k]
    }

    pub fn coeff_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.coeffs[k]
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    pub fn constant_term(&self) -> &DMatrix<f64> {
        &self.coeffs[0]
    }

    pub fn truncated(&self, order: usize) -> Self {
        assert!(order <= self.order(), "cannot truncate upward");
        Self {
            n: self.n,
            p: self.p,
            coeffs: self.coeffs[..=order].to_vec(),
        }
    }

    /// Extends with zero coefficients up to `order`.
    pub fn padded(&self, alg: &TensorAlgebra, order: usize) -> Self {
        let mut s = self.clone();
        for k in s.coeffs.len()..=order {
            s.coeffs.push(DMatrix::zeros(self.p, alg.m(k)));
        }
        s
    }

    /// Row `i` as a scalar series.
    pub fn row(&self, i: usize) -> ScalarSeries {
        Self {
            n: self.n,
            p: 1,
            coeffs: self.coeffs.iter().map(|c| c.rows(i, 1).into_owned()).collect(),
        }
    }

    /// Stacks scalar or vector series row-wise; orders are truncated to the minimum.
    pub fn stack(parts: &[PowerSeries]) -> Result<Self, SeriesError> {
        let first = parts
            .first()
            .ok_or_else(|| SeriesError::Dimension("nothing to stack".into()))?;
        let order = parts.iter().map(|s| s.order()).min().unwrap_or(0);
        if parts.iter().any(|s| s.n != first.n) {
            return Err(SeriesError::Dimension("stacked series differ in n".into()));
        }
        let p: usize = parts.iter().map(|s| s.p).sum();
        let coeffs = (0..=order)
            .map(|k| {
                let cols = parts[0].coeffs[k].ncols();
                let mut m = DMatrix::zeros(p, cols);
                let mut r = 0;
                for s in parts {
                    m.rows_mut(r, s.p).copy_from(&s.coeffs[k]);
                    r += s.p;
                }
                m
            })
            .collect();
        Ok(Self { n: first.n, p, coeffs })
    }

    pub fn eval(&self, alg: &TensorAlgebra, x: &[f64]) -> DVector<f64> {
        let mut out = self.coeffs[0].column(0).into_owned();
        let mut buf = Vec::new();
        for (k, c) in self.coeffs.iter().enumerate().skip(1) {
            let basis = alg.basis(k);
            buf.resize(basis.len(), 0.0);
            basis.eval_into(x, &mut buf);
            out += c * DVector::from_column_slice(&buf);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    /// Largest absolute coefficient across all orders.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), SeriesError> {
        if self.n != other.n || self.p != other.p {
            return Err(SeriesError::Dimension(format!(
                "(n={}, p={}) vs (n={}, p={})",
                self.n, self.p, other.n, other.p
            )));
        }
        Ok(())
    }

    /// Coefficient-wise sum, truncated to the smaller order.
    pub fn add(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_same_shape(other)?;
        let order = self.order().min(other.order());
        Ok(Self {
            n: self.n,
            p: self.p,
            coeffs: (0..=order).map(|k| &self.coeffs[k] + &other.coeffs[k]).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_same_shape(other)?;
        let order = self.order().min(other.order());
        Ok(Self {
            n: self.n,
            p: self.p,
            coeffs: (0..=order).map(|k| &self.coeffs[k] - &other.coeffs[k]).collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            p: self.p,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// Left-multiplies every coefficient by a constant `q × p` matrix.
    pub fn left_mul(&self, a: &DMatrix<f64>) -> Result<Self, SeriesError> {
        if a.ncols() != self.p {
            return Err(SeriesError::Dimension(format!(
                "{}x{} matrix times series with p={}",
                a.nrows(),
                a.ncols(),
                self.p
            )));
        }
        Ok(Self {
            n: self.n,
            p: a.nrows(),
            coeffs: self.coeffs.iter().map(|c| a * c).collect(),
        })
    }
}

/// Scatters `Σ_{a,b} lhs[:,a]·rhs[:,b] x^i_a x^j_b` into `out` (length `m_{i+j}`).
fn accumulate_pair(
    alg: &TensorAlgebra,
    i: usize,
    lhs: &DMatrix<f64>,
    j: usize,
    rhs: &DMatrix<f64>,
    out: &mut [f64],
) {
    let kr = alg.reducer(i, j);
    let m_j = kr.right_len();
    let targets = kr.targets();
    let weights = kr.weights();
    if lhs.nrows() == 1 {
        let l = lhs.as_slice();
        let r = rhs.as_slice();
        for (a, &la) in l.iter().enumerate() {
            if la == 0.0 {
                continue;
            }
            let base = a * m_j;
            for (b, &rb) in r.iter().enumerate() {
                out[targets[base + b] as usize] += weights[base + b] * la * rb;
            }
        }
    } else {
        let gram = lhs.tr_mul(rhs);
        for a in 0..gram.nrows() {
            let base = a * m_j;
            for b in 0..m_j {
                let v = gram[(a, b)];
                if v != 0.0 {
                    out[targets[base + b] as usize] += weights[base + b] * v;
                }
            }
        }
    }
}

fn is_zero_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 0.0)
}

/// The single order-`k` coefficient (a `1 × m_k` row) of `sᵀl`.
pub fn dot_coefficient(
    alg: &TensorAlgebra,
    s: &PowerSeries,
    l: &PowerSeries,
    k: usize,
) -> Result<DMatrix<f64>, SeriesError> {
    s.check_same_shape(l)?;
    let mut out = vec![0.0; alg.m(k)];
    for i in 0..=k.min(s.order()) {
        let j = k - i;
        if j > l.order() {
            continue;
        }
        let (si, lj) = (&s.coeffs[i], &l.coeffs[j]);
        if is_zero_matrix(si) || is_zero_matrix(lj) {
            continue;
        }
        accumulate_pair(alg, i, si, j, lj, &mut out);
    }
    Ok(DMatrix::from_row_slice(1, out.len(), &out))
}

/// `sᵀl` truncated at `order`.
pub fn series_dot(
    alg: &TensorAlgebra,
    s: &PowerSeries,
    l: &PowerSeries,
    order: usize,
) -> Result<ScalarSeries, SeriesError> {
    s.check_same_shape(l)?;
    let coeffs = (0..=order)
        .map(|k| dot_coefficient(alg, s, l, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PowerSeries {
        n: s.n,
        p: 1,
        coeffs,
    })
}

/// Product of two scalar series truncated at `order`; skips orders below
/// the sum of the factors' lowest nonzero orders.
pub fn mul_scalar(
    alg: &TensorAlgebra,
    a: &ScalarSeries,
    b: &ScalarSeries,
    order: usize,
) -> Result<ScalarSeries, SeriesError> {
    if a.p != 1 || b.p != 1 {
        return Err(SeriesError::Dimension("mul_scalar needs p = 1".into()));
    }
    let low = |s: &ScalarSeries| s.coeffs.iter().position(|c| !is_zero_matrix(c));
    let mut out = PowerSeries::zeros(alg, 1, order);
    let (Some(la), Some(lb)) = (low(a), low(b)) else {
        return Ok(out);
    };
    for k in (la + lb)..=order {
        let row = dot_coefficient(alg, a, b, k)?;
        out.coeffs[k] = row;
    }
    Ok(out)
}

/// Scalar series times vector series, componentwise.
pub fn scalar_times_vector(
    alg: &TensorAlgebra,
    scalar: &ScalarSeries,
    v: &PowerSeries,
    order: usize,
) -> Result<PowerSeries, SeriesError> {
    let rows = (0..v.p)
        .map(|i| mul_scalar(alg, scalar, &v.row(i), order))
        .collect::<Result<Vec<_>, _>>()?;
    PowerSeries::stack(&rows)
}

/// `gᵀs` for a matrix-valued series given by its columns `g_1..g_m`.
pub fn matrix_series_dot(
    alg: &TensorAlgebra,
    g: &[PowerSeries],
    s: &PowerSeries,
    order: usize,
) -> Result<PowerSeries, SeriesError> {
    if s.p != alg.n() {
        return Err(SeriesError::Dimension(format!(
            "series has p={}, expected the state dimension {}",
            s.p,
            alg.n()
        )));
    }
    let rows = g
        .iter()
        .map(|gi| series_dot(alg, gi, s, order))
        .collect::<Result<Vec<_>, _>>()?;
    PowerSeries::stack(&rows)
}

/// `Σ_j outer[j] · inner^j` truncated at `order`; the inner series must have
/// a zero constant term.
pub fn compose_univariate(
    alg: &TensorAlgebra,
    outer: &[f64],
    inner: &ScalarSeries,
    order: usize,
) -> Result<ScalarSeries, SeriesError> {
    if inner.p != 1 {
        return Err(SeriesError::Dimension("inner series must be scalar".into()));
    }
    let c0 = inner.coeffs[0][(0, 0)];
    if c0 != 0.0 {
        return Err(SeriesError::NonzeroConstant(c0));
    }
    let inner = if inner.order() >= order {
        inner.truncated(order)
    } else {
        inner.padded(alg, order)
    };
    let mut out = PowerSeries::zeros(alg, 1, order);
    if let Some(&a0) = outer.first() {
        out.coeffs[0][(0, 0)] = a0;
    }
    let top = outer.len().saturating_sub(1).min(order);
    let even = outer.iter().skip(1).step_by(2).all(|&a| a == 0.0);
    if even {
        // Σ a_{2j} (inner²)^j needs half as many products
        if top < 2 {
            return Ok(out);
        }
        let sq = mul_scalar(alg, &inner, &inner, order)?;
        let mut pow = sq.clone();
        let mut j = 2;
        while j <= top {
            if outer[j] != 0.0 {
                add_scaled(&mut out, &pow, outer[j]);
            }
            j += 2;
            if j <= top {
                pow = mul_scalar(alg, &pow, &sq, order)?;
            }
        }
        return Ok(out);
    }
    let mut pow = inner.clone();
    for (j, &c) in outer.iter().enumerate().take(top + 1).skip(1) {
        if j > 1 {
            pow = mul_scalar(alg, &pow, &inner, order)?;
        }
        if c != 0.0 {
            add_scaled(&mut out, &pow, c);
        }
    }
    Ok(out)
}

fn add_scaled(acc: &mut PowerSeries, term: &PowerSeries, factor: f64) {
    for (a, t) in acc.coeffs.iter_mut().zip(&term.coeffs) {
        *a += t * factor;
    }
}

/// `Σ_i ψ_i(v_i)` for a separable penalty, channel coefficients in `psi`.
pub fn multi_psi_expand(
    alg: &TensorAlgebra,
    psi: &[Vec<f64>],
    v: &PowerSeries,
    order: usize,
) -> Result<ScalarSeries, SeriesError> {
    if psi.len() != v.p {
        return Err(SeriesError::Dimension(format!(
            "{} channel expansions for a {}-channel series",
            psi.len(),
            v.p
        )));
    }
    let mut out = PowerSeries::zeros(alg, 1, order);
    for (i, coeffs) in psi.iter().enumerate() {
        let term = compose_univariate(alg, coeffs, &v.row(i), order)?;
        add_scaled(&mut out, &term, 1.0);
    }
    Ok(out)
}
