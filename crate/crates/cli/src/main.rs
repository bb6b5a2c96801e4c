use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use nlreg::controller::{check_value_decay, simulate, Controller, SimOptions};
use nlreg::dynamics::{Model, ModelError};
use nlreg::lin_solvers::{min_eigenvalue_sym, spectral_abscissa};
use nlreg::nlr_engine::{
    solve_model, verify_hjb, EngineError, HjbResidualReport, Problem, ResidualOrder, SolveOptions,
    DEFAULT_ALPHA_MAX, DEFAULT_RESIDUAL_TOL, MAX_ORDER,
};
use nlreg::roc::{roc_surface, Window};
use nlreg::solution_file::{model_hash, SolutionDocument, BASIS_ORDERING, TOOL_VERSION};

/// Files above this size still get written, with a warning.
const SIZE_WARNING_BYTES: usize = 50 * 1024 * 1024;

#[derive(Parser, Debug)]
#[command(name = "nlreg", version, about = "Taylor-series optimal nonlinear regulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the series coefficients of f, g, Q and the input penalty, with assumption checks
    Expand(Common),
    /// Solve for P_1..P_k and write the solution and diagnostics files
    Solve(Common),
    /// Estimate the radius of convergence from a stored solution
    Roc(RocArgs),
    /// Simulate the closed loop from one initial state
    Simulate(SimArgs),
    /// Simulate several truncation orders from one initial state and tabulate costs
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Model file (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Truncation order; defaults to the model file's `order`
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=MAX_ORDER as u64))]
    order: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Threshold on α above which the change of coordinates is applied
    #[arg(long, default_value_t = DEFAULT_ALPHA_MAX)]
    alpha_max: f64,
    /// Relative tolerance for the HJB residual check
    #[arg(long, default_value_t = DEFAULT_RESIDUAL_TOL)]
    tol: f64,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct RocArgs {
    #[command(flatten)]
    common: Common,
    /// Solution file; defaults to `<out>/<model stem>.solution.json`
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Number of sampled directions
    #[arg(long, default_value_t = 400)]
    directions: usize,
    /// Window of orders, e.g. `20..30`; defaults to the last max(5, k/3) orders
    #[arg(long)]
    window: Option<String>,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Solution file; defaults to `<out>/<model stem>.solution.json`
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Initial state, comma separated
    #[arg(long, allow_hyphen_values = true)]
    x0: String,
    /// Final time if neither convergence nor divergence is detected first
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Initial state, comma separated
    #[arg(long, allow_hyphen_values = true)]
    x0: String,
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
    /// Truncation orders to compare, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    orders: Vec<usize>,
}

enum Failure {
    Input(String),
    Numerical { tag: String, msg: String },
    Resource(String),
}

impl Failure {
    fn numerical(tag: impl Into<String>, msg: impl ToString) -> Self {
        Failure::Numerical {
            tag: tag.into(),
            msg: msg.to_string(),
        }
    }

    fn report(&self) -> ExitCode {
        match self {
            Failure::Input(msg) => {
                eprintln!("error[input]: {msg}");
                ExitCode::from(2)
            }
            Failure::Numerical { tag, msg } => {
                eprintln!("error[{tag}]: {msg}");
                ExitCode::from(1)
            }
            Failure::Resource(msg) => {
                eprintln!("error[resource]: {msg}");
                ExitCode::from(3)
            }
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ResourceCap { .. } => Failure::Resource(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(m) => m.into(),
            EngineError::Are(inner) => Failure::numerical("are", inner),
            EngineError::Conditioning(inner) => Failure::numerical("conditioning", inner),
            EngineError::Order(_) => Failure::Input(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("NLREG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    let result = match cli.command {
        Command::Expand(c) => cmd_expand(&c),
        Command::Solve(c) => cmd_solve(&c),
        Command::Roc(a) => cmd_roc(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn load_model(c: &Common) -> Result<(Model, usize), Failure> {
    let model = Model::load(&c.model).map_err(|e| Failure::Input(format!("{}: {e}", c.model.display())))?;
    let order = c.order.map_or(model.order, |o| o as usize);
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Failure::Input(format!("order {order} is outside 1..={MAX_ORDER}")));
    }
    Ok((model, order))
}

fn stem(c: &Common) -> String {
    c.model
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn output_path(c: &Common, suffix: &str) -> PathBuf {
    c.out.join(format!("{}.{suffix}", stem(c)))
}

fn write_output(path: &Path, contents: &str, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(Failure::Input(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    }
    if contents.len() > SIZE_WARNING_BYTES {
        eprintln!(
            "warning: {} is {:.1} MB",
            path.display(),
            contents.len() as f64 / (1024.0 * 1024.0)
        );
    }
    fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn rows(m: &DMatrix<f64>) -> Value {
    Value::from(
        m.row_iter()
            .map(|r| Value::from(r.iter().copied().collect::<Vec<_>>()))
            .collect::<Vec<_>>(),
    )
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn cmd_expand(c: &Common) -> Outcome {
    let (model, order) = load_model(c)?;
    let prob = Problem::new(&model, order)?;
    let (sys, cost) = (&prob.sys, &prob.cost);
    let top = order + 1;
    let f: Vec<Value> = (1..=top)
        .map(|k| json!({"k": k, "coefficients": rows(sys.f_coeff(k))}))
        .collect();
    let g: Vec<Value> = (0..model.m)
        .flat_map(|i| (0..=order).map(move |k| (i, k)))
        .map(|(i, k)| json!({"input": i + 1, "k": k, "coefficients": rows(sys.g_coeff(i, k))}))
        .collect();
    let q: Vec<Value> = (2..cost.q_tensors.len().min(top + 1))
        .map(|k| json!({"k": k, "coefficients": rows(&cost.q_tensors[k])}))
        .collect();
    let r: Vec<Value> = (1..cost.r_tilde.len().min(top + 1))
        .map(|k| json!({"k": k, "coefficients": rows(&cost.r_tilde[k])}))
        .collect();
    let f1 = sys.f1();
    let report = json!({
        "tool_version": TOOL_VERSION,
        "model_name": model.name,
        "model_hash": model_hash(&model),
        "basis": {"n": model.n, "ordering": BASIS_ORDERING},
        "n": model.n,
        "m": model.m,
        "order": order,
        "checks": {
            "equilibrium_residual": sys.equilibrium_residual,
            "q1_min_eigenvalue": min_eigenvalue_sym(&cost.q1),
            "r1_min_eigenvalue": min_eigenvalue_sym(&cost.r1()),
            "stabilizable": sys.stabilizable,
            "f1_spectral_abscissa": spectral_abscissa(&f1),
        },
        "F": f,
        "G": g,
        "Q1": rows(&cost.q1),
        "Q": q,
        "R_tilde": r,
    });
    write_output(&output_path(c, "expansion.json"), &pretty(&report), c.force)?;
    println!(
        "expanded {} (n = {}, m = {}) through order {top}; all assumption checks passed",
        c.model.display(),
        model.n,
        model.m
    );
    Ok(())
}

fn residual_json(r: &ResidualOrder) -> Value {
    json!({"order": r.order, "max_abs": r.max_abs, "scale": r.scale, "relative": r.relative})
}

fn report_json(rep: &HjbResidualReport, tol: f64) -> Value {
    json!({
        "tol": tol,
        "max_relative": rep.max_relative(),
        "passes": rep.passes(tol),
        "orders": rep.orders.iter().map(residual_json).collect::<Vec<_>>(),
        "tail": rep.tail.as_ref().map(residual_json),
    })
}

fn cmd_solve(c: &Common) -> Outcome {
    let (model, order) = load_model(c)?;
    let opts = SolveOptions {
        alpha_max: c.alpha_max,
        ..SolveOptions::default()
    };
    let sol = solve_model(&model, order, &opts)?;
    let prob = Problem::new(&model, order)?;
    let residual = verify_hjb(&prob, &sol.p);

    let doc = SolutionDocument::from_solution(&model, &sol);
    let d = &sol.diagnostics;
    let diagnostics = json!({
        "tool_version": TOOL_VERSION,
        "model_hash": doc.model_hash,
        "order": order,
        "solved_order": sol.solved_order(),
        "wall_seconds": d.wall_seconds,
        "riccati": {"iterations": d.are_iterations, "residual": d.are_residual},
        "conditioning": {
            "transformed": sol.conditioning.transformed,
            "alpha": sol.conditioning.alpha,
            "alpha_max": c.alpha_max,
            "t": rows(&sol.conditioning.t),
        },
        "orders": d.orders.iter().map(|o| json!({
            "k": o.k,
            "inverse_norm": o.inv_norm,
            "backward_error": o.backward_error,
            "wall_seconds": o.wall_seconds,
        })).collect::<Vec<_>>(),
        "warnings": d.warnings,
        "hjb_residual": report_json(&residual, c.tol),
    });
    write_output(&output_path(c, "solution.json"), &doc.to_json(), c.force)?;
    write_output(&output_path(c, "diagnostics.json"), &pretty(&diagnostics), c.force)?;

    let alpha = sol.conditioning.alpha.map_or("n/a".to_string(), |a| format!("{a:.6}"));
    println!(
        "solved orders 1..={} of {order} in {:.3} s; transform {}; alpha = {alpha}; max relative HJB residual {:.3e}",
        sol.solved_order(),
        d.wall_seconds,
        if sol.conditioning.transformed { "applied" } else { "not needed" },
        residual.max_relative(),
    );
    if let Some(f) = &sol.failure {
        return Err(Failure::numerical(format!("order {}", f.k), &f.message));
    }
    if !residual.passes(c.tol) {
        return Err(Failure::numerical(
            "residual",
            format!("HJB residual {:.3e} exceeds {:.1e}", residual.max_relative(), c.tol),
        ));
    }
    Ok(())
}

fn load_solution(c: &Common, path: &Option<PathBuf>, model: &Model) -> Result<Vec<DMatrix<f64>>, Failure> {
    let path = path.clone().unwrap_or_else(|| output_path(c, "solution.json"));
    let text = fs::read_to_string(&path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let doc = SolutionDocument::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    doc.check_model(model)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(doc.coefficients())
}

fn parse_state(text: &str, n: usize) -> Result<Vec<f64>, Failure> {
    let x = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Input(format!("--x0 '{text}': {e}")))?;
    if x.len() != n {
        return Err(Failure::Input(format!("--x0 has {} components, model has n = {n}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Failure::Input("--x0 must be finite".into()));
    }
    Ok(x)
}

fn parse_window(text: &str) -> Result<Window, Failure> {
    let bad = || Failure::Input(format!("--window '{text}' should look like 20..30"));
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let hi = hi.trim_start_matches('=');
    Ok(Window {
        lo: lo.trim().parse().map_err(|_| bad())?,
        hi: hi.trim().parse().map_err(|_| bad())?,
    })
}

fn cmd_roc(a: &RocArgs) -> Outcome {
    let c = &a.common;
    let (model, _) = load_model(c)?;
    let p = load_solution(c, &a.solution, &model)?;
    let top = p.len();
    if top < 2 {
        return Err(Failure::Input("the radius estimate needs a solution of order 2 or more".into()));
    }
    let window = match &a.window {
        Some(w) => parse_window(w)?,
        None => Window::tail(top),
    };
    let alg = nlreg::monomial_tensor::TensorAlgebra::new(model.n, top);
    let est = roc_surface(&alg, &p, a.directions, window).map_err(|e| Failure::Input(e.to_string()))?;
    let mut buf = Vec::new();
    est.write_csv(&mut buf).map_err(|e| Failure::Input(e.to_string()))?;
    write_output(
        &output_path(c, "roc.csv"),
        &String::from_utf8(buf).expect("csv is ascii"),
        c.force,
    )?;
    println!(
        "r* = {:.6} (orders {}..{}); smallest directional radius {:.6} over {} directions",
        est.r_star,
        window.lo,
        window.hi,
        est.min_radius(),
        est.radii.len()
    );
    Ok(())
}

fn active_order(c: &Common, available: usize) -> Result<usize, Failure> {
    let k = c.order.map_or(available, |o| o as usize);
    if k > available {
        return Err(Failure::Input(format!("order {k} requested but the solution stops at {available}")));
    }
    Ok(k)
}

fn cmd_simulate(a: &SimArgs) -> Outcome {
    let c = &a.common;
    let (model, _) = load_model(c)?;
    let p = load_solution(c, &a.solution, &model)?;
    let k = active_order(c, p.len())?;
    let x0 = parse_state(&a.x0, model.n)?;
    let ctrl = Controller::from_coefficients(&model, &p, k).map_err(|e| Failure::Input(e.to_string()))?;
    let traj = simulate(&model, &ctrl, &x0, a.horizon, &SimOptions::default()).map_err(|e| match e {
        nlreg::controller::ControllerError::Stiff { .. } | nlreg::controller::ControllerError::StepBudget(_) => {
            Failure::numerical("simulate", e)
        }
        other => Failure::Input(other.to_string()),
    })?;
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).map_err(|e| Failure::Input(e.to_string()))?;
    write_output(
        &output_path(c, &format!("k{k}.trajectory.csv")),
        &String::from_utf8(buf).expect("csv is ascii"),
        c.force,
    )?;
    let v0 = ctrl.eval_value(&x0).map_err(|e| Failure::Input(e.to_string()))?;
    println!(
        "{} at t = {:.4}; cost {:.9e}{}; V(x0) = {:.9e}",
        traj.termination.as_str(),
        traj.t.last().copied().unwrap_or(0.0),
        traj.total_cost(),
        if traj.tail_added() { " (includes quadratic tail)" } else { "" },
        v0
    );
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Outcome {
    let c = &a.common;
    let (model, _) = load_model(c)?;
    let p = load_solution(c, &a.solution, &model)?;
    let x0 = parse_state(&a.x0, model.n)?;
    for &k in &a.orders {
        if k == 0 || k > p.len() {
            return Err(Failure::Input(format!("order {k} is not in the solution (1..={})", p.len())));
        }
    }
    let rows: Vec<String> = a
        .orders
        .par_iter()
        .map(|&k| {
            let ctrl = Controller::from_coefficients(&model, &p, k).expect("orders were checked");
            let v0 = ctrl.eval_value(&x0).expect("x0 was checked");
            match simulate(&model, &ctrl, &x0, a.horizon, &SimOptions::default()) {
                Ok(traj) => {
                    let rep = check_value_decay(&ctrl, &traj, SimOptions::default().rtol);
                    let umax = traj.max_abs_control().into_iter().fold(0.0, f64::max);
                    format!(
                        "{k},{},{:.6e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6e},{:.6e},{}",
                        traj.termination.as_str(),
                        traj.t.last().copied().unwrap_or(0.0),
                        traj.integrated_cost(),
                        traj.tail_cost,
                        traj.total_cost(),
                        v0,
                        traj.final_state().norm(),
                        umax,
                        rep.samples
                    )
                }
                Err(e) => {
                    eprintln!("warning: order {k}: {e}");
                    format!("{k},failed,nan,nan,nan,nan,{v0:.12e},nan,nan,0")
                }
            }
        })
        .collect();
    let mut csv = String::from(
        "order,termination,t_end,integrated_cost,tail_cost,total_cost,value_x0,final_norm,max_abs_u,samples\n",
    );
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_output(&output_path(c, "compare.csv"), &csv, c.force)?;
    print!("{csv}");
    Ok(())
}
