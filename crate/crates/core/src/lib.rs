pub mod monomial_tensor;
pub mod power_series;
pub mod univariate;
pub mod lin_solvers;
pub mod expr;
pub mod dynamics;
pub mod nlr_engine;
pub mod roc;
pub mod controller;
pub mod solution_file;
