//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use nlreg::dynamics::{Model, ModelFile};
use rand::Rng;

pub fn fixture(name: &str) -> Model {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    Model::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn model_from_json(json: &str) -> Model {
    let file: ModelFile = serde_json::from_str(json).unwrap();
    Model::from_file(&file).unwrap()
}

fn term(c: f64, mono: &str) -> String {
    format!("({c:.6})*{mono}")
}

fn monomials(n: usize, degree: usize) -> Vec<String> {
    fn rec(n: usize, start: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<String>) {
        if left == 0 {
            out.push(cur.iter().map(|i| format!("x{}", i + 1)).collect::<Vec<_>>().join("*"));
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(n, i, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, 0, degree, &mut Vec::new(), &mut out);
    out
}

/// A random control-affine system with cubic drift, affine-in-state input
/// gains and a quadratic-plus-quartic state cost.
pub fn random_cubic_system<R: Rng>(rng: &mut R, saturating: bool) -> (Model, String) {
    let n = rng.random_range(1..=3usize);
    let m = rng.random_range(1..=2usize);
    let mut dynamics = Vec::new();
    for _ in 0..n {
        let mut parts = Vec::new();
        for deg in 1..=3 {
            for mono in monomials(n, deg) {
                // keep the higher-degree part sparse
                if deg == 1 || rng.random_bool(0.5) {
                    parts.push(term(rng.random_range(-1.0..1.0), &mono));
                }
            }
        }
        for j in 0..m {
            let mut gij = format!("({:.6})", rng.random_range(-1.5..1.5));
            if rng.random_bool(0.3) {
                let i = rng.random_range(1..=n);
                gij = format!("({gij} + ({:.6})*x{i})", rng.random_range(-0.5..0.5));
            }
            parts.push(format!("{gij}*u{}", j + 1));
        }
        dynamics.push(parts.join(" + "));
    }
    let mut q = Vec::new();
    for i in 1..=n {
        q.push(term(rng.random_range(0.5..2.0), &format!("x{i}^2")));
        if rng.random_bool(0.5) {
            q.push(term(rng.random_range(0.0..0.5), &format!("x{i}^4")));
        }
    }
    let penalty = if saturating {
        format!(r#"{{"kind":"tanh","gain":{:.4}}}"#, rng.random_range(0.5..3.0))
    } else {
        let rows: Vec<String> = (0..m)
            .map(|i| {
                let row: Vec<String> = (0..m)
                    .map(|j| if i == j { format!("{:.4}", rng.random_range(0.5..2.0)) } else { "0".into() })
                    .collect();
                format!("[{}]", row.join(","))
            })
            .collect();
        format!(r#"{{"kind":"quadratic","R1":[{}]}}"#, rows.join(","))
    };
    let dyn_json: Vec<String> = dynamics.iter().map(|d| format!("\"{d}\"")).collect();
    let json = format!(
        r#"{{"n":{n},"m":{m},"dynamics":[{}],"Q":"{}","penalty":{penalty},"order":10}}"#,
        dyn_json.join(","),
        q.join(" + ")
    );
    (model_from_json(&json), json)
}

/// `e^{A}` by scaling and squaring around a degree-24 Taylor polynomial.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let n = a.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}
