//! Lexicographic monomial basis and the reducer matrices that fold redundant
//! Kronecker powers onto it.
//!
//! For a state `x ∈ ℝⁿ` the order-`k` basis vector `x^k` lists the
//! `m_k = C(n+k-1, k)` distinct degree-`k` monomials, `x_1` most significant,
//! each scaled by the square root of its multinomial coefficient so that
//! `‖x^k‖ = ‖x‖^k` and `⟨x^k, y^k⟩ = (xᵀy)^k`.
//!
//! `L_k` maps `x^k` back to the full Kronecker power `x^{⊗k}`; `K_{i,j}`
//! folds `x^i ⊗ x^j` onto `x^{i+j}`. Both are built combinatorially from
//! exponent tuples, never by forming `n^k`-sized products.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Upper bound on `n^k` rows for an explicitly materialized `L_k`.
pub const L_ROW_CAP: usize = 1_000_000;
/// Upper bound on the number of columns `m_i · m_j` of a `K_{i,j}` table.
pub const K_COLUMN_CAP: usize = 50_000_000;

/// Above this order multinomial weights come from log-factorials.
const EXACT_WEIGHT_ORDER: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{what} needs {requested} entries, above the cap of {cap}")]
    ResourceCap {
        what: &'static str,
        requested: u128,
        cap: usize,
    },
    #[error("non-finite input: {0}")]
    Domain(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
}

/// Binomial coefficient `C(n, k)` in exact integer arithmetic.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is always divisible by (i + 1) at this point
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Number of degree-`k` monomials in `n` variables, `C(n+k-1, k)`.
pub fn monomial_count(n: usize, k: usize) -> usize {
    assert!(n >= 1, "state dimension must be positive");
    binomial(n + k - 1, k) as usize
}

fn ln_factorial(k: u32) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

fn factorial_u64(k: u32) -> u64 {
    (1..=k as u64).product()
}

/// Multinomial coefficient `k!/(k_1!…k_n!)` as `(value, ln value)`.
fn multinomial(exps: &[u32]) -> (f64, f64) {
    let k: u32 = exps.iter().sum();
    if (k as usize) <= EXACT_WEIGHT_ORDER {
        let denom: u64 = exps.iter().map(|&e| factorial_u64(e)).product();
        let value = factorial_u64(k) / denom;
        (value as f64, (value as f64).ln())
    } else {
        let ln = ln_factorial(k) - exps.iter().map(|&e| ln_factorial(e)).sum::<f64>();
        (ln.exp(), ln)
    }
}

/// The lexicographic basis `x^k` for a fixed `(n, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    n: usize,
    k: usize,
    exponents: Vec<u32>,
    coeffs: Vec<f64>,
    ln_multinomial: Vec<f64>,
}

impl MonomialBasis {
    pub fn new(n: usize, k: usize) -> Self {
        assert!(n >= 1, "state dimension must be positive");
        let m = monomial_count(n, k);
        let mut exponents = Vec::with_capacity(m * n);
        let mut current = vec![0u32; n];
        enumerate_compositions(k as u32, 0, &mut current, &mut exponents);
        debug_assert_eq!(exponents.len(), m * n);

        let mut coeffs = Vec::with_capacity(m);
        let mut ln_multinomial = Vec::with_capacity(m);
        for e in exponents.chunks_exact(n) {
            let (value, ln) = multinomial(e);
            coeffs.push(value.sqrt());
            ln_multinomial.push(ln);
        }
        Self {
            n,
            k,
            exponents,
            coeffs,
            ln_multinomial,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.k
    }

    /// `m_k`, the number of basis entries.
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn exponent(&self, idx: usize) -> &[u32] {
        &self.exponents[idx * self.n..(idx + 1) * self.n]
    }

    pub fn exponents(&self) -> impl Iterator<Item = &[u32]> {
        self.exponents.chunks_exact(self.n)
    }

    /// Square-root multinomial weight `c_{k_1,…,k_n}` of entry `idx`.
    pub fn coeff(&self, idx: usize) -> f64 {
        self.coeffs[idx]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Natural log of the squared weight `c²` (the multinomial coefficient).
    pub fn ln_weight_sq(&self, idx: usize) -> f64 {
        self.ln_multinomial[idx]
    }

    /// Position of an exponent tuple in the lexicographic listing.
    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        if exps.len() != self.n || exps.iter().map(|&e| e as usize).sum::<usize>() != self.k {
            return None;
        }
        Some(rank(exps))
    }

    /// Evaluates `x^k`. Fails on non-finite input.
    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>, TensorError> {
        if x.len() != self.n {
            return Err(TensorError::Shape {
                expected: format!("{}-vector", self.n),
                found: format!("{}-vector", x.len()),
            });
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(TensorError::Domain(format!("state component {bad}")));
        }
        let mut out = DVector::zeros(self.len());
        self.eval_into(x, out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked evaluation into a caller-provided buffer of length `m_k`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let powers = power_table(x, self.k);
        let stride = self.k + 1;
        for (idx, e) in self.exponents().enumerate() {
            let mut v = self.coeffs[idx];
            for (i, &ei) in e.iter().enumerate() {
                if ei > 0 {
                    v *= powers[i * stride + ei as usize];
                }
            }
            out[idx] = v;
        }
    }
}

fn power_table(x: &[f64], k: usize) -> Vec<f64> {
    let stride = k + 1;
    let mut t = vec![1.0; x.len() * stride];
    for (i, &xi) in x.iter().enumerate() {
        for p in 1..=k {
            t[i * stride + p] = t[i * stride + p - 1] * xi;
        }
    }
    t
}

fn enumerate_compositions(remaining: u32, pos: usize, current: &mut [u32], out: &mut Vec<u32>) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.extend_from_slice(current);
        return;
    }
    for v in (0..=remaining).rev() {
        current[pos] = v;
        enumerate_compositions(remaining - v, pos + 1, current, out);
    }
}

/// Lexicographic rank of an exponent tuple among tuples of the same degree.
fn rank(exps: &[u32]) -> usize {
    let n = exps.len();
    let mut rem: usize = exps.iter().map(|&e| e as usize).sum();
    let mut idx = 0usize;
    for (i, &e) in exps.iter().enumerate().take(n - 1) {
        let e = e as usize;
        let parts = n - i - 1;
        if rem > e {
            // tuples with a larger entry at this position come first
            idx += binomial(rem - e - 1 + parts, parts) as usize;
        }
        rem -= e;
    }
    idx
}

/// Explicit `L_k`: `x^{⊗k} = L_k x^k`. One nonzero per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducerL {
    n: usize,
    k: usize,
    cols: usize,
    col_of_row: Vec<u32>,
    value_of_row: Vec<f64>,
}

/// Builds `L_k`, refusing when `n^k` exceeds [`L_ROW_CAP`].
pub fn build_l(n: usize, k: usize) -> Result<ReducerL, TensorError> {
    let rows = (n as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if rows > L_ROW_CAP as u128 {
        return Err(TensorError::ResourceCap {
            what: "L_k",
            requested: rows,
            cap: L_ROW_CAP,
        });
    }
    let rows = rows as usize;
    let basis = MonomialBasis::new(n, k);
    let mut col_of_row = Vec::with_capacity(rows);
    let mut value_of_row = Vec::with_capacity(rows);
    let mut digits = vec![0usize; k];
    let mut exps = vec![0u32; n];
    for _ in 0..rows {
        exps.iter_mut().for_each(|e| *e = 0);
        for &d in &digits {
            exps[d] += 1;
        }
        let col = rank(&exps);
        col_of_row.push(col as u32);
        value_of_row.push(1.0 / basis.coeff(col));
        // odometer over Kronecker indices, first factor most significant
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < n {
                break;
            }
            *d = 0;
        }
    }
    Ok(ReducerL {
        n,
        k,
        cols: basis.len(),
        col_of_row,
        value_of_row,
    })
}

impl ReducerL {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.col_of_row.len(), self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.value_of_row.iter().filter(|v| **v != 0.0).count()
    }

    /// Coordinate list `(row, col, value)` in row order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.col_of_row
            .iter()
            .zip(&self.value_of_row)
            .enumerate()
            .map(|(r, (&c, &v))| (r, c as usize, v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (rows, cols) = self.shape();
        let mut m = DMatrix::zeros(rows, cols);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    /// `L_k · xk`, i.e. the full Kronecker power from its reduced listing.
    pub fn apply(&self, xk: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.col_of_row.len(),
            self.entries().map(|(_, c, v)| v * xk[c]),
        )
    }
}

/// `K_{i,j}` with `(x^i ⊗ x^j) = K_{i,j}ᵀ x^{i+j}`; shape `m_{i+j} × m_i m_j`.
///
/// Stored column-wise: column `a·m_j + b` (pairing entry `a` of `x^i` with
/// entry `b` of `x^j`) has a single nonzero at row `target[col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducerK {
    n: usize,
    i: usize,
    j: usize,
    rows: usize,
    m_j: usize,
    target: Vec<u32>,
    weight: Vec<f64>,
}

/// Builds `K_{i,j}` by merging exponent tuples.
pub fn build_k(n: usize, i: usize, j: usize) -> Result<ReducerK, TensorError> {
    let left = MonomialBasis::new(n, i);
    let right = MonomialBasis::new(n, j);
    let merged = MonomialBasis::new(n, i + j);
    build_k_from(&left, &right, &merged)
}

fn build_k_from(
    left: &MonomialBasis,
    right: &MonomialBasis,
    merged: &MonomialBasis,
) -> Result<ReducerK, TensorError> {
    let n = left.n();
    let cols = left.len() as u128 * right.len() as u128;
    if cols > K_COLUMN_CAP as u128 {
        return Err(TensorError::ResourceCap {
            what: "K_{i,j}",
            requested: cols,
            cap: K_COLUMN_CAP,
        });
    }
    let exact = merged.order() <= EXACT_WEIGHT_ORDER;
    let mut target = Vec::with_capacity(cols as usize);
    let mut weight = Vec::with_capacity(cols as usize);
    let mut sum = vec![0u32; n];
    for (a, ea) in left.exponents().enumerate() {
        for (b, eb) in right.exponents().enumerate() {
            for d in 0..n {
                sum[d] = ea[d] + eb[d];
            }
            let t = rank(&sum);
            let w = if exact {
                let ca = left.coeff(a);
                let cb = right.coeff(b);
                let ct = merged.coeff(t);
                ca * cb / ct
            } else {
                (0.5 * (left.ln_weight_sq(a) + right.ln_weight_sq(b) - merged.ln_weight_sq(t)))
                    .exp()
            };
            target.push(t as u32);
            weight.push(w);
        }
    }
    Ok(ReducerK {
        n,
        i: left.order(),
        j: right.order(),
        rows: merged.len(),
        m_j: right.len(),
        target,
        weight,
    })
}

impl ReducerK {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn orders(&self) -> (usize, usize) {
        (self.i, self.j)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.target.len())
    }

    /// `m_j`, the stride of the right factor in the column index.
    pub fn right_len(&self) -> usize {
        self.m_j
    }

    /// Target row and weight of column `col`.
    #[inline]
    pub fn column(&self, col: usize) -> (usize, f64) {
        (self.target[col] as usize, self.weight[col])
    }

    pub fn targets(&self) -> &[u32] {
        &self.target
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Coordinate list `(row, col, value)` in column order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.target
            .iter()
            .zip(&self.weight)
            .enumerate()
            .map(|(c, (&r, &w))| (r as usize, c, w))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (rows, cols) = self.shape();
        let mut m = DMatrix::zeros(rows, cols);
        for (r, c, w) in self.entries() {
            m[(r, c)] = w;
        }
        m
    }

    /// `K · v` for `v` of length `m_i m_j`.
    pub fn apply(&self, v: &[f64]) -> DVector<f64> {
        assert_eq!(v.len(), self.target.len(), "K_{{i,j}} column count");
        let mut out = DVector::zeros(self.rows);
        for (c, (&r, &w)) in self.target.iter().zip(&self.weight).enumerate() {
            out[r as usize] += w * v[c];
        }
        out
    }

    /// `Kᵀ · y` for `y` of length `m_{i+j}`.
    pub fn apply_transpose(&self, y: &[f64]) -> DVector<f64> {
        assert_eq!(y.len(), self.rows, "K_{{i,j}} row count");
        DVector::from_iterator(
            self.target.len(),
            self.target
                .iter()
                .zip(&self.weight)
                .map(|(&r, &w)| w * y[r as usize]),
        )
    }

    /// `K (A ⊗ B) Kᵀ` with `A` of size `m_i × m_i` and `B` of size `m_j × m_j`.
    pub fn sandwich(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let m_i = self.target.len() / self.m_j;
        assert_eq!(a.shape(), (m_i, m_i));
        assert_eq!(b.shape(), (self.m_j, self.m_j));
        let mut out = DMatrix::zeros(self.rows, self.rows);
        for a1 in 0..m_i {
            for a2 in 0..m_i {
                let av = a[(a1, a2)];
                if av == 0.0 {
                    continue;
                }
                for b1 in 0..self.m_j {
                    let (r1, w1) = self.column(a1 * self.m_j + b1);
                    for b2 in 0..self.m_j {
                        let bv = b[(b1, b2)];
                        if bv == 0.0 {
                            continue;
                        }
                        let (r2, w2) = self.column(a2 * self.m_j + b2);
                        out[(r1, r2)] += w1 * w2 * av * bv;
                    }
                }
            }
        }
        out
    }

    /// `K (I ⊗ B) Kᵀ`; the identity factor has size `m_i`.
    pub fn sandwich_identity(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let m_i = self.target.len() / self.m_j;
        assert_eq!(b.shape(), (self.m_j, self.m_j));
        let mut out = DMatrix::zeros(self.rows, self.rows);
        for a in 0..m_i {
            for b1 in 0..self.m_j {
                let (r1, w1) = self.column(a * self.m_j + b1);
                for b2 in 0..self.m_j {
                    let bv = b[(b1, b2)];
                    if bv == 0.0 {
                        continue;
                    }
                    let (r2, w2) = self.column(a * self.m_j + b2);
                    out[(r1, r2)] += w1 * w2 * bv;
                }
            }
        }
        out
    }
}

/// Column-stacking `vec`.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>, TensorError> {
    if v.len() != rows * cols {
        return Err(TensorError::Shape {
            expected: format!("{} entries for {rows}x{cols}", rows * cols),
            found: format!("{} entries", v.len()),
        });
    }
    Ok(DMatrix::from_column_slice(rows, cols, v))
}

/// Lazily populated bases and `K_{i,j}` tables for one state dimension,
/// covering every order up to `max_order`. Shareable across threads.
#[derive(Debug)]
pub struct TensorAlgebra {
    n: usize,
    max_order: usize,
    bases: Vec<OnceLock<MonomialBasis>>,
    reducers: Vec<OnceLock<ReducerK>>,
}

impl TensorAlgebra {
    pub fn new(n: usize, max_order: usize) -> Self {
        assert!(n >= 1, "state dimension must be positive");
        let pairs = (max_order + 1) * (max_order + 2) / 2;
        Self {
            n,
            max_order,
            bases: (0..=max_order).map(|_| OnceLock::new()).collect(),
            reducers: (0..pairs).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn basis(&self, k: usize) -> &MonomialBasis {
        assert!(
            k <= self.max_order,
            "order {k} beyond tensor algebra capacity {}",
            self.max_order
        );
        self.bases[k].get_or_init(|| MonomialBasis::new(self.n, k))
    }

    pub fn m(&self, k: usize) -> usize {
        monomial_count(self.n, k)
    }

    /// `K_{i,j}`; panics when `i + j` exceeds the configured order or the
    /// table exceeds [`K_COLUMN_CAP`].
    pub fn reducer(&self, i: usize, j: usize) -> &ReducerK {
        let s = i + j;
        assert!(
            s <= self.max_order,
            "order {s} beyond tensor algebra capacity {}",
            self.max_order
        );
        let slot = s * (s + 1) / 2 + i;
        self.reducers[slot].get_or_init(|| {
            build_k_from(self.basis(i), self.basis(j), self.basis(s))
                .unwrap_or_else(|e| panic!("{e}"))
        })
    }

    /// `K_k = K_{k,1}`.
    pub fn reducer_k(&self, k: usize) -> &ReducerK {
        self.reducer(k, 1)
    }

    /// Reduced Kronecker power `A_k` with `(A x)^k = A_k x^k`.
    pub fn reduced_power(&self, a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        assert_eq!(a.shape(), (self.n, self.n));
        let mut acc = DMatrix::identity(1, 1);
        for order in 1..=k {
            acc = self.reducer(order - 1, 1).sandwich(&acc, a);
        }
        acc
    }
}

/// A matricized symmetric tensor coefficient `P_k ∈ ℝ^{n×m_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTensor {
    k: usize,
    matrix: DMatrix<f64>,
    symmetric: bool,
}

/// Relative tolerance for membership of `vec(P_k)` in `range(K_kᵀ)`.
pub const SYMMETRY_TOL: f64 = 1e-9;

impl ReducedTensor {
    /// Wraps a matrix and records whether it satisfies the symmetry condition.
    pub fn new(alg: &TensorAlgebra, k: usize, matrix: DMatrix<f64>) -> Result<Self, TensorError> {
        let expected = (alg.n(), alg.m(k));
        if matrix.shape() != expected {
            return Err(TensorError::Shape {
                expected: format!("{}x{}", expected.0, expected.1),
                found: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        let mut t = Self {
            k,
            matrix,
            symmetric: false,
        };
        t.symmetric = t.symmetry_defect(alg) <= SYMMETRY_TOL;
        Ok(t)
    }

    /// Builds `P_k = unvec(K_kᵀ p)`, symmetric by construction.
    pub fn from_reduced(alg: &TensorAlgebra, k: usize, p: &[f64]) -> Self {
        let v = alg.reducer_k(k).apply_transpose(p);
        Self {
            k,
            matrix: DMatrix::from_column_slice(alg.n(), alg.m(k), v.as_slice()),
            symmetric: true,
        }
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// `‖v − K_kᵀK_k v‖ / ‖v‖` with `v = vec(P_k)`; zero for the zero tensor.
    pub fn symmetry_defect(&self, alg: &TensorAlgebra) -> f64 {
        let kr = alg.reducer_k(self.k);
        let v = self.matrix.as_slice();
        let norm = self.matrix.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let projected = kr.apply_transpose(kr.apply(v).as_slice());
        let diff: f64 = v
            .iter()
            .zip(projected.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        diff.sqrt() / norm
    }

    /// `P_k x^k`.
    pub fn apply(&self, xk: &DVector<f64>) -> DVector<f64> {
        &self.matrix * xk
    }
}
