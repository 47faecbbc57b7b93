use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use nondiv_fem::assembly::solve_linear_nondiv;
use nondiv_fem::coefficients::check_cordes;
use nondiv_fem::hjb::{solve_hjb, Method};
use nondiv_fem::lifting::LiftingOperator;
use nondiv_fem::problem::Problem;
use nondiv_fem::report::to_json_string;
use nondiv_fem::verify::{run_suite, DEFAULT_SEED};
use nondiv_fem::FemError;

const THREADS_ENV: &str = "NDFEM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ndfem", version, about = "Discrete-Hessian FEM for non-divergence and HJB problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate the Cordès condition of a problem on its coarsest mesh.
    CheckCordes(Common),
    /// Solve the linear non-divergence problem of a single-control problem.
    SolveLinear(Common),
    /// Solve the HJB problem by the fixed-point or policy iteration.
    SolveHjb(HjbArgs),
    /// Refinement study with error norms and observed orders.
    Convergence(Common),
    /// Run the built-in invariant suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Problem file, or `bundled:<name>`.
    #[arg(long)]
    problem: String,
    /// Number of mesh levels; solves use the finest one.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Also write solution.vtk.
    #[arg(long)]
    vtk: bool,
}

#[derive(Args, Debug)]
struct HjbArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    max_iter: Option<usize>,
    /// `contraction` or `policy`.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Include the slower stability, contraction and dominance checks.
    #[arg(long)]
    full: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn record(&self) -> Value {
        let (kind, offset) = match self {
            CliError::Fem(e) => (fem_kind(e), fem_offset(e)),
            CliError::Write { .. } => ("io", None),
            CliError::Usage(_) => ("invalid-argument", None),
        };
        let mut rec = json!({ "kind": kind, "message": self.to_string() });
        if let Some(o) = offset {
            rec["offset"] = json!(o);
        }
        json!({ "error": rec })
    }
}

fn fem_kind(e: &FemError) -> &'static str {
    match e {
        FemError::Parse { .. } | FemError::MeshParse { .. } => "parse",
        FemError::Problem(_) => "problem",
        FemError::SingularSystem(_) => "singular-system",
        FemError::Io(_) => "io",
        FemError::InvalidArgument(_)
        | FemError::NonPositiveLambda(_)
        | FemError::UnsupportedDegree(_)
        | FemError::UnsupportedExponent(_) => "invalid-argument",
        _ => "numerical",
    }
}

fn fem_offset(e: &FemError) -> Option<usize> {
    match e {
        FemError::Parse { offset, .. } => Some(*offset),
        _ => None,
    }
}

/// Payload files plus wall-clock data kept apart so payloads stay reproducible.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        let text = to_json_string(value)?;
        self.write(name, &text)
    }

    fn finish(mut self, command: &str) -> Result<(), CliError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let meta = json!({
            "command": command,
            "finished_unix_seconds": now,
            "elapsed_seconds": self.started.elapsed().as_secs_f64(),
            "threads": rayon::current_num_threads(),
            "files": self.files.clone(),
        });
        let text = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Usage(e.to_string()))? + "\n";
        self.write("metadata.json", &text)
    }
}

fn load_problem(args: &Common) -> Result<Problem, CliError> {
    let mut problem = Problem::load(&args.problem)?;
    if let Some(l) = args.levels {
        problem.levels = l;
    }
    if let Some(r) = args.degree {
        problem.degree = r;
    }
    if let Some(p) = args.p {
        problem.p = p;
    }
    if let Some(l) = args.lambda {
        problem.cordes.lambda = Some(l);
        problem.hjb.lambda = Some(l);
    }
    if let Some(t) = args.tol {
        problem.hjb.options.tol = t;
    }
    problem.check_settings()?;
    Ok(problem)
}

fn header(problem: &Problem, command: &str, seed: u64) -> Value {
    json!({
        "command": command,
        "problem": problem.name,
        "domain_n": problem.n,
        "degree": problem.degree,
        "levels": problem.levels,
        "p": problem.p,
        "n_controls": problem.controls.len(),
        "seed": seed,
    })
}

fn check_cordes_cmd(args: &Common) -> Result<bool, CliError> {
    let problem = load_problem(args)?;
    let mut out = Output::new(&args.out)?;
    let space = problem.space(0)?;
    let samples = Problem::samples(&space);
    let condition = problem.cordes.condition;
    let (lambda, search) = if condition.is_special() {
        (problem.cordes.lambda.unwrap_or(1.0), None)
    } else {
        match problem.cordes.lambda {
            Some(l) => (l, None),
            None => {
                let s = problem.search_lambda(&samples)?;
                (s.lambda, Some(s))
            }
        }
    };
    let report = check_cordes(condition, &problem.controls, lambda, &samples, 2)?;
    let mut doc = header(&problem, "check-cordes", args.seed);
    doc["lambda_search"] = serde_json::to_value(search).map_err(|e| CliError::Usage(e.to_string()))?;
    doc["cordes"] = serde_json::to_value(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    out.json("report.json", &doc)?;
    out.finish("check-cordes")?;
    match report.max_epsilon {
        Some(e) => println!("{} lambda={lambda:.6} max_epsilon={e:.12}", condition.as_str()),
        None => println!(
            "{} lambda={lambda:.6} infeasible at {} sample(s)",
            condition.as_str(),
            report.infeasible_points
        ),
    }
    Ok(true)
}

fn finest(problem: &Problem) -> Result<(usize, Arc<LiftingOperator>), CliError> {
    let level = problem.levels - 1;
    let lifting = Arc::new(LiftingOperator::for_space(problem.space(level)?)?);
    Ok((level, lifting))
}

fn solve_linear_cmd(args: &Common) -> Result<bool, CliError> {
    let problem = load_problem(args)?;
    if problem.controls.len() != 1 {
        return Err(CliError::Usage(format!(
            "solve-linear needs exactly one control, problem '{}' has {}; use solve-hjb",
            problem.name,
            problem.controls.len()
        )));
    }
    let mut out = Output::new(&args.out)?;
    let (level, lifting) = finest(&problem)?;
    let sol = solve_linear_nondiv(&lifting, &problem.controls.controls()[0], problem.exact(), problem.p)?;
    let mut doc = header(&problem, "solve-linear", args.seed);
    doc["level"] = json!(level);
    doc["solve"] = serde_json::to_value(&sol.report).map_err(|e| CliError::Usage(e.to_string()))?;
    out.json("report.json", &doc)?;
    if args.vtk {
        out.write("solution.vtk", &sol.solution.to_vtk(&problem.name))?;
    }
    out.finish("solve-linear")?;
    println!(
        "solved {} dofs, residual {:.3e}",
        sol.report.n_dofs, sol.report.residual
    );
    if let Some(e) = &sol.report.errors {
        println!("w2ph error {:.6e}", e.w2ph);
    }
    Ok(true)
}

fn solve_hjb_cmd(args: &HjbArgs) -> Result<bool, CliError> {
    let mut problem = load_problem(&args.common)?;
    if let Some(m) = args.max_iter {
        problem.hjb.options.max_iter = m;
    }
    if let Some(m) = &args.method {
        problem.hjb.options.method = match m.as_str() {
            "contraction" => Method::Contraction,
            "policy" => Method::Policy,
            other => return Err(CliError::Usage(format!("unknown method '{other}'"))),
        };
    }
    problem.hjb.options.validate()?;
    let mut out = Output::new(&args.common.out)?;
    let (level, lifting) = finest(&problem)?;
    let samples = Problem::samples(lifting.vh());
    let lambda = problem.hjb_lambda(&samples)?;
    let sol = solve_hjb(lifting, &problem.controls, lambda, &problem.hjb.options, problem.exact())?;
    let mut doc = header(&problem, "solve-hjb", args.common.seed);
    doc["level"] = json!(level);
    doc["hjb"] = serde_json::to_value(&sol.report).map_err(|e| CliError::Usage(e.to_string()))?;
    out.json("report.json", &doc)?;
    out.write("iteration_log.csv", &sol.report.iteration_log_csv())?;
    if args.common.vtk {
        out.write("solution.vtk", &sol.state.u.to_vtk(&problem.name))?;
    }
    out.finish("solve-hjb")?;
    println!(
        "lambda={lambda:.6} iterations={} converged={} residual={:.3e}",
        sol.report.iterations, sol.report.converged, sol.report.final_residual
    );
    Ok(sol.report.converged)
}

fn convergence_cmd(args: &Common) -> Result<bool, CliError> {
    let problem = load_problem(args)?;
    let mut out = Output::new(&args.out)?;
    let lambda = problem.hjb.lambda;
    let table = problem.convergence(problem.levels, lambda)?;
    let mut doc = header(&problem, "convergence", args.seed);
    doc["table"] = serde_json::to_value(&table).map_err(|e| CliError::Usage(e.to_string()))?;
    out.json("report.json", &doc)?;
    out.write("table.csv", &table.to_csv())?;
    if args.vtk {
        let sol = problem.solve_level(problem.levels - 1, lambda)?;
        out.write("solution.vtk", &sol.solution.to_vtk(&problem.name))?;
    }
    out.finish("convergence")?;
    for (k, r) in table.rows.iter().enumerate() {
        let eoc = if k == 0 { None } else { table.eoc_w2ph[k - 1] };
        match eoc {
            Some(e) => println!("level {} h={:.4e} w2ph={:.6e} eoc={e:.4}", r.level, r.h, r.w2ph),
            None => println!("level {} h={:.4e} w2ph={:.6e}", r.level, r.h, r.w2ph),
        }
    }
    Ok(true)
}

fn verify_cmd(args: &VerifyArgs) -> Result<bool, CliError> {
    let mut out = Output::new(&args.out)?;
    let report = run_suite(args.seed, args.full)?;
    let doc = serde_json::to_value(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    out.json("report.json", &doc)?;
    out.finish("verify")?;
    for c in &report.checks {
        println!("{}", c.line());
    }
    Ok(report.all_passed)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    configure_threads()?;
    match &cli.command {
        Command::CheckCordes(a) => check_cordes_cmd(a),
        Command::SolveLinear(a) => solve_linear_cmd(a),
        Command::SolveHjb(a) => solve_hjb_cmd(a),
        Command::Convergence(a) => convergence_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let rec = e.record();
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(2)
        }
    }
}
