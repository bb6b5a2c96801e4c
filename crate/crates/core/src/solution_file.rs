//! Plain-text JSON form of a solved regulator.
//!
//! The document holds only deterministic quantities, so identical inputs give
//! byte-identical files. Timings live in the separate diagnostics output.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Model;
use crate::monomial_tensor::monomial_count;
use crate::nlr_engine::NlrSolution;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const FORMAT: &str = "nlreg-solution/1";

/// Exponent tuples of each degree are listed with the exponent of `x1`
/// descending, then `x2`, and so on; each monomial carries the weight
/// `sqrt(k!/(k_1!…k_n!))`.
pub const BASIS_ORDERING: &str = "graded-lex-desc/sqrt-multinomial/1";

#[derive(Debug, Error)]
pub enum SolutionFileError {
    #[error("invalid solution file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported {what} '{found}' (expected '{expected}')")]
    Unsupported {
        what: &'static str,
        found: String,
        expected: &'static str,
    },
    #[error("coefficient block {k} has shape {rows}x{cols}, expected {n}x{expected_cols}")]
    Shape {
        k: usize,
        rows: usize,
        cols: usize,
        n: usize,
        expected_cols: usize,
    },
    #[error("solution was computed for model {stored}, not {found}")]
    ModelMismatch { stored: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisInfo {
    pub n: usize,
    pub ordering: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBlock {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries of `P_k`.
    pub data: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformInfo {
    pub applied: bool,
    pub t: Vec<Vec<f64>>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiInfo {
    pub iterations: usize,
    pub residual: f64,
    pub gain: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub k: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionDocument {
    pub format: String,
    pub tool_version: String,
    pub model_name: Option<String>,
    pub model_hash: String,
    pub basis: BasisInfo,
    pub n: usize,
    pub m: usize,
    pub order: usize,
    pub solved_order: usize,
    pub coefficients: Vec<CoefficientBlock>,
    pub transform: TransformInfo,
    pub riccati: RiccatiInfo,
    pub failure: Option<FailureInfo>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Hash identifying the model itself, independent of run settings.
pub fn model_hash(model: &Model) -> String {
    model.digest("")
}

impl SolutionDocument {
    pub fn from_solution(model: &Model, sol: &NlrSolution) -> Self {
        Self {
            format: FORMAT.into(),
            tool_version: TOOL_VERSION.into(),
            model_name: model.name.clone(),
            model_hash: model_hash(model),
            basis: BasisInfo {
                n: sol.n,
                ordering: BASIS_ORDERING.into(),
            },
            n: sol.n,
            m: sol.m,
            order: sol.order,
            solved_order: sol.solved_order(),
            coefficients: sol
                .p
                .iter()
                .enumerate()
                .map(|(i, pk)| CoefficientBlock {
                    k: i + 1,
                    rows: pk.nrows(),
                    cols: pk.ncols(),
                    data: rows_of(pk),
                })
                .collect(),
            transform: TransformInfo {
                applied: sol.conditioning.transformed,
                t: rows_of(&sol.conditioning.t),
                alpha: sol.conditioning.alpha,
            },
            riccati: RiccatiInfo {
                iterations: sol.diagnostics.are_iterations,
                residual: sol.diagnostics.are_residual,
                gain: rows_of(&sol.diagnostics.gain),
            },
            failure: sol.failure.as_ref().map(|f| FailureInfo {
                k: f.k,
                message: f.message.clone(),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    /// Parses and checks format tags and block shapes.
    pub fn from_json(text: &str) -> Result<Self, SolutionFileError> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(SolutionFileError::Unsupported {
                what: "format",
                found: doc.format,
                expected: FORMAT,
            });
        }
        if doc.basis.ordering != BASIS_ORDERING {
            return Err(SolutionFileError::Unsupported {
                what: "basis ordering",
                found: doc.basis.ordering,
                expected: BASIS_ORDERING,
            });
        }
        for (i, b) in doc.coefficients.iter().enumerate() {
            let k = i + 1;
            let expected_cols = monomial_count(doc.n, k);
            let ragged = b.data.len() != b.rows || b.data.iter().any(|r| r.len() != b.cols);
            if b.k != k || b.rows != doc.n || b.cols != expected_cols || ragged {
                return Err(SolutionFileError::Shape {
                    k,
                    rows: b.rows,
                    cols: b.cols,
                    n: doc.n,
                    expected_cols,
                });
            }
        }
        Ok(doc)
    }

    /// `P_1..P_j` as matrices.
    pub fn coefficients(&self) -> Vec<DMatrix<f64>> {
        self.coefficients.iter().map(|b| from_rows(&b.data, b.cols)).collect()
    }

    pub fn check_model(&self, model: &Model) -> Result<(), SolutionFileError> {
        let found = model_hash(model);
        if found != self.model_hash {
            return Err(SolutionFileError::ModelMismatch {
                stored: self.model_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}
