//! Command-line front end: `solve`, `simulate`, `bench` and `verify`.
//!
//! Exit codes: 0 success, 1 bad input or I/O failure, 2 infeasible OCP,
//! 3 solver failure, 4 a verification check failed.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bench::{bench_csv, parse_grid, run_bench};
use crate::error::{Error, Result};
use crate::model::{load_problem_file, OcpProblem};
use crate::oracle::{affine_residual, controller_residual, verify, VerifyLevel};
use crate::qp::QpMethod;
use crate::simulate::{run_many, trajectory_csv, PolicyMode, RunStatus, SimOptions};
use crate::synthesis::{solve_ocp, CostMode, FilterMode, SolverStats, SynthesisOptions, SynthesisResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "tdsls",
    version,
    about = "Robust MPC synthesis for uncertain time-delay systems"
)]
struct Cli {
    /// Worker threads for simulation runs and bench trials.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FilterArg {
    Full,
    Diag,
    Anchored,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CostArg {
    PerTime,
    Literal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Ipm,
    Admm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Receding,
    OpenloopPolicy,
}

#[derive(Debug, Args)]
struct SynthesisFlags {
    #[arg(long, value_enum, default_value = "full")]
    filter: FilterArg,
    #[arg(long, value_enum, default_value = "per-time")]
    cost: CostArg,
    /// Feasibility and optimality tolerance.
    #[arg(long, env = "TDSLS_TOL")]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_enum, default_value = "ipm")]
    solver: SolverArg,
}

impl SynthesisFlags {
    fn options(&self) -> Result<SynthesisOptions> {
        let mut o = SynthesisOptions {
            filter: match self.filter {
                FilterArg::Full => FilterMode::Full,
                FilterArg::Diag => FilterMode::DiagOnly,
                FilterArg::Anchored => FilterMode::Anchored,
            },
            cost: match self.cost {
                CostArg::PerTime => CostMode::PerTime,
                CostArg::Literal => CostMode::Literal,
            },
            ..Default::default()
        };
        o.qp.method = match self.solver {
            SolverArg::Ipm => QpMethod::InteriorPoint,
            SolverArg::Admm => QpMethod::Admm,
        };
        if let Some(tol) = self.tol {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
            }
            o.qp.tol_feas = tol;
            o.qp.tol_opt = tol;
        }
        if let Some(n) = self.max_iter {
            o.qp.max_iter = n;
        }
        Ok(o)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one OCP and print a JSON summary.
    Solve {
        problem: PathBuf,
        #[command(flatten)]
        flags: SynthesisFlags,
        /// Write the summary here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop Monte Carlo runs; one CSV per run plus summary.json.
    Simulate {
        problem: PathBuf,
        #[command(flatten)]
        flags: SynthesisFlags,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "receding")]
        mode: ModeArg,
        /// Hold one uncertainty draw for the whole run.
        #[arg(long)]
        freeze_uncertainty: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Time random systems over a grid of (na, nb, T).
    Bench {
        /// `sweep`, `sweep-nodelay` or rows `na,nb,T;...`.
        #[arg(long, default_value = "sweep")]
        grid: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        flags: SynthesisFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve, then run the oracle checks on the result.
    Verify {
        problem: PathBuf,
        #[command(flatten)]
        flags: SynthesisFlags,
        #[arg(long, value_enum, default_value = "fast")]
        level: VerifyLevel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `# tdsls <version> | <invocation>`.
pub fn header_line(args: &[OsString]) -> String {
    let invocation: Vec<_> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    format!("# tdsls {} | {}", env!("CARGO_PKG_VERSION"), invocation.join(" "))
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::SolverFailure(_) | Error::Qp(_) => EXIT_SOLVER,
        _ => EXIT_INPUT,
    }
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary serializes");
    s.push('\n');
    s
}

fn status_str(err: &Error) -> &'static str {
    match err {
        Error::Infeasible(_) => "infeasible",
        _ => "solver_failure",
    }
}

fn failure_stats(err: &Error) -> Option<&SolverStats> {
    match err {
        Error::Infeasible(s) | Error::SolverFailure(s) => Some(s),
        _ => None,
    }
}

fn solve_summary(header: &str, problem: &OcpProblem, result: &SynthesisResult) -> serde_json::Value {
    let q: Vec<Vec<f64>> = result.sigma.q.iter().map(|q| q.iter().copied().collect()).collect();
    json!({
        "generator": header,
        "status": "optimal",
        "objective": result.objective,
        "u0": result.nominal_u.block(0).iter().copied().collect::<Vec<_>>(),
        "q": q,
        "solver": result.solver_stats,
        "residuals": {
            "affine": affine_residual(&problem.system, result),
            "controller_identity": controller_residual(result),
        },
    })
}

/// Solves and converts a solver verdict into its summary and exit code.
fn solve_or_report(
    header: &str,
    problem: &OcpProblem,
    options: &SynthesisOptions,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<std::result::Result<SynthesisResult, i32>> {
    match solve_ocp(problem, options) {
        Ok(r) => Ok(Ok(r)),
        Err(e) => match failure_stats(&e) {
            Some(stats) => {
                let summary = json!({
                    "generator": header,
                    "status": status_str(&e),
                    "solver": stats,
                });
                emit(out, &to_json(&summary), stdout)?;
                Ok(Err(exit_code(&e)))
            }
            None => Err(e),
        },
    }
}

fn cmd_solve(
    header: &str,
    problem: &Path,
    flags: &SynthesisFlags,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let problem = load_problem_file(problem)?;
    let options = flags.options()?;
    match solve_or_report(header, &problem, &options, out, stdout)? {
        Ok(result) => {
            emit(out, &to_json(&solve_summary(header, &problem, &result)), stdout)?;
            Ok(EXIT_OK)
        }
        Err(code) => Ok(code),
    }
}

fn solve_time_stats(times: &mut [f64]) -> serde_json::Value {
    if times.is_empty() {
        return json!({ "count": 0 });
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    json!({
        "count": n,
        "mean_s": times.iter().sum::<f64>() / n as f64,
        "median_s": median,
        "max_s": times[n - 1],
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    header: &str,
    problem: &Path,
    flags: &SynthesisFlags,
    steps: usize,
    runs: usize,
    seed: u64,
    mode: ModeArg,
    freeze_uncertainty: bool,
    out_dir: &Path,
) -> Result<i32> {
    let problem = load_problem_file(problem)?;
    let options = SimOptions {
        steps,
        seed,
        mode: match mode {
            ModeArg::Receding => PolicyMode::Receding,
            ModeArg::OpenloopPolicy => PolicyMode::OpenloopPolicy,
        },
        freeze_uncertainty,
        synthesis: flags.options()?,
        ..Default::default()
    };
    std::fs::create_dir_all(out_dir)?;
    let results = run_many(&problem, &options, runs);
    let mut entries = Vec::new();
    let mut times = Vec::new();
    let (mut total_violations, mut completed) = (0, 0);
    for (run, traj) in results.into_iter().enumerate() {
        let traj = traj?;
        let file = format!("run_{run:04}.csv");
        std::fs::write(out_dir.join(&file), trajectory_csv(&traj, Some(header)))?;
        times.extend(traj.per_step_solve.iter().map(|s| s.stats.solve_time));
        total_violations += traj.violations.len();
        completed += usize::from(traj.status == RunStatus::Completed);
        entries.push(json!({
            "run": run,
            "status": traj.status,
            "steps": traj.inputs.len(),
            "violations": traj.violations,
            "min_slack": traj.min_slack(&problem, options.mode),
            "csv": file,
        }));
    }
    let summary = json!({
        "generator": header,
        "steps": steps,
        "seed": seed,
        "runs": entries,
        "completed_runs": completed,
        "total_violations": total_violations,
        "solve_time": solve_time_stats(&mut times),
    });
    std::fs::write(out_dir.join("summary.json"), to_json(&summary))?;
    Ok(EXIT_OK)
}

fn cmd_verify(
    header: &str,
    problem: &Path,
    flags: &SynthesisFlags,
    level: VerifyLevel,
    seed: u64,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let problem = load_problem_file(problem)?;
    let options = flags.options()?;
    let result = match solve_or_report(header, &problem, &options, out, stdout)? {
        Ok(r) => r,
        Err(code) => return Ok(code),
    };
    let report = verify(&problem, &result, level, seed)?;
    let passed = report.passed();
    let summary = json!({
        "generator": header,
        "passed": passed,
        "checks": report.checks,
    });
    emit(out, &to_json(&summary), stdout)?;
    Ok(if passed { EXIT_OK } else { EXIT_CHECK })
}

fn dispatch(cli: Cli, header: &str, stdout: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Solve { problem, flags, out } => cmd_solve(header, &problem, &flags, out.as_deref(), stdout),
        Command::Simulate {
            problem,
            flags,
            steps,
            runs,
            seed,
            mode,
            freeze_uncertainty,
            out_dir,
        } => cmd_simulate(
            header,
            &problem,
            &flags,
            steps,
            runs,
            seed,
            mode,
            freeze_uncertainty,
            &out_dir,
        ),
        Command::Bench {
            grid,
            trials,
            seed,
            flags,
            out,
        } => {
            let grid = parse_grid(&grid)?;
            let records = run_bench(&grid, trials, seed, &flags.options()?)?;
            emit(out.as_deref(), &bench_csv(&records, Some(header)), stdout)?;
            Ok(EXIT_OK)
        }
        Command::Verify {
            problem,
            flags,
            level,
            seed,
            out,
        } => cmd_verify(header, &problem, &flags, level, seed, out.as_deref(), stdout),
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code. Help and version output go to `stdout`, errors to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_INPUT
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    let header = header_line(&args);
    let mut buffer = Vec::new();
    let outcome = match cli.jobs {
        Some(jobs) => match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| dispatch(cli, &header, &mut buffer)),
            Err(e) => Err(Error::InvalidArgument(format!("cannot start {jobs} workers: {e}"))),
        },
        None => dispatch(cli, &header, &mut buffer),
    };
    let outcome = outcome.and_then(|code| {
        stdout.write_all(&buffer)?;
        Ok(code)
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
