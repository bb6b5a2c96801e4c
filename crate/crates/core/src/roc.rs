//! Radius-of-convergence estimates for `V_x = Σ P_k x^k` from the tail of
//! the computed coefficients.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lin_solvers::norm2;
use crate::monomial_tensor::TensorAlgebra;

/// Radii above this are reported as unbounded (`f64::INFINITY`).
pub const RADIUS_CAP: f64 = 1e6;

/// Tail norms below this count as zero when deciding unboundedness.
const NEGLIGIBLE: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum RocError {
    #[error("direction must have unit length (norm {0})")]
    NotUnit(f64),
    #[error("direction has {found} components, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("window {lo}..={hi} is outside the available orders 2..={available}")]
    Window { lo: usize, hi: usize, available: usize },
    #[error("csv output failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Inclusive range of orders used by the limsup estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub lo: usize,
    pub hi: usize,
}

impl Window {
    /// The last `max(5, k̄/3)` orders, clipped to start at 2.
    pub fn tail(order: usize) -> Self {
        let width = (order / 3).max(5);
        Self {
            lo: (order + 1).saturating_sub(width).max(2),
            hi: order,
        }
    }

    fn check(&self, available: usize) -> Result<(), RocError> {
        if self.lo < 2 || self.lo > self.hi || self.hi > available {
            return Err(RocError::Window {
                lo: self.lo,
                hi: self.hi,
                available,
            });
        }
        Ok(())
    }
}

/// `1 / max_k a_k^{1/k}` over the window, skipping exact zeros.
fn limsup_radius(norms: impl Iterator<Item = (usize, f64)>) -> f64 {
    let mut worst = 0.0f64;
    for (k, a) in norms {
        if a == 0.0 || a < NEGLIGIBLE {
            continue;
        }
        worst = worst.max(a.powf(1.0 / k as f64));
    }
    if worst == 0.0 {
        return f64::INFINITY;
    }
    let r = 1.0 / worst;
    if r > RADIUS_CAP {
        f64::INFINITY
    } else {
        r
    }
}

/// Directional radius along the unit vector `dir`, from `‖P_k dir^k‖`.
pub fn directional_radius(
    alg: &TensorAlgebra,
    p: &[DMatrix<f64>],
    dir: &[f64],
    window: Window,
) -> Result<f64, RocError> {
    if dir.len() != alg.n() {
        return Err(RocError::Dimension {
            expected: alg.n(),
            found: dir.len(),
        });
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(RocError::NotUnit(norm));
    }
    window.check(p.len())?;
    let mut buf = Vec::new();
    let norms = (window.lo..=window.hi).map(|k| {
        let basis = alg.basis(k);
        buf.resize(basis.len(), 0.0);
        basis.eval_into(dir, &mut buf);
        let pk = &p[k - 1];
        let mut acc = 0.0;
        for r in 0..pk.nrows() {
            let s: f64 = (0..pk.ncols()).map(|c| pk[(r, c)] * buf[c]).sum();
            acc += s * s;
        }
        (k, acc.sqrt())
    });
    Ok(limsup_radius(norms.collect::<Vec<_>>().into_iter()))
}

/// Radius of the largest ball on which the series is guaranteed to converge,
/// from spectral norms `‖P_k‖`.
pub fn spherical_radius(p: &[DMatrix<f64>], window: Window) -> Result<f64, RocError> {
    window.check(p.len())?;
    Ok(limsup_radius((window.lo..=window.hi).map(|k| (k, norm2(&p[k - 1])))))
}

/// Quasi-uniform unit directions: an angle grid for `n = 2`, a Fibonacci
/// sphere for `n = 3`, Halton points pushed through Box-Muller otherwise.
pub fn sample_directions(n: usize, count: usize) -> Vec<DVector<f64>> {
    match n {
        0 => vec![],
        1 => (0..count.max(1))
            .map(|i| DVector::from_element(1, if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect(),
        2 => (0..count)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                DVector::from_column_slice(&[th.cos(), th.sin()])
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    DVector::from_column_slice(&[r * th.cos(), r * th.sin(), z])
                })
                .collect()
        }
        _ => {
            let pairs = n.div_ceil(2);
            let primes = first_primes(2 * pairs);
            (1..=count)
                .map(|i| {
                    let mut g = Vec::with_capacity(2 * pairs);
                    for p in 0..pairs {
                        let u1 = radical_inverse(i, primes[2 * p]).max(1e-12);
                        let u2 = radical_inverse(i, primes[2 * p + 1]);
                        let rad = (-2.0 * u1.ln()).sqrt();
                        let th = 2.0 * std::f64::consts::PI * u2;
                        g.push(rad * th.cos());
                        g.push(rad * th.sin());
                    }
                    let v = DVector::from_column_slice(&g[..n]);
                    let nv = v.norm();
                    v / nv
                })
                .collect()
        }
    }
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn first_primes(count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut c = 2;
    while out.len() < count {
        if out.iter().all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocEstimate {
    pub directions: Vec<DVector<f64>>,
    pub radii: Vec<f64>,
    pub r_star: f64,
    pub window: Window,
    pub order: usize,
}

impl RocEstimate {
    pub fn min_radius(&self) -> f64 {
        self.radii.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Columns `d1..dn, radius, b1..bn` with `b = radius·d`; unbounded radii
    /// are written as `inf`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), RocError> {
        let n = self.directions.first().map_or(0, |d| d.len());
        let mut header: Vec<String> = (1..=n).map(|i| format!("d{i}")).collect();
        header.push("radius".into());
        header.extend((1..=n).map(|i| format!("b{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (d, &r) in self.directions.iter().zip(&self.radii) {
            let mut row: Vec<String> = d.iter().map(|v| format!("{v:.12e}")).collect();
            row.push(fmt_radius(r));
            row.extend(d.iter().map(|v| fmt_radius(v * r)));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn fmt_radius(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else if v.is_nan() {
        // 0·inf along an axis-aligned direction
        "0".to_string()
    } else {
        format!("{v:.12e}")
    }
}

/// Directional radii over `n_dirs` sampled directions plus the spherical radius.
pub fn roc_surface(
    alg: &TensorAlgebra,
    p: &[DMatrix<f64>],
    n_dirs: usize,
    window: Window,
) -> Result<RocEstimate, RocError> {
    window.check(p.len())?;
    let directions = sample_directions(alg.n(), n_dirs);
    let radii = directions
        .iter()
        .map(|d| directional_radius(alg, p, d.as_slice(), window))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RocEstimate {
        directions,
        radii,
        r_star: spherical_radius(p, window)?,
        window,
        order: p.len(),
    })
}
