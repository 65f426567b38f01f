//! Timing sweep over randomly generated delay systems.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presets::random_scalability;
use crate::simulate::run_rng;
use crate::synthesis::{solve_ocp, SolverStats, SynthesisOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridRow {
    pub na: usize,
    pub nb: usize,
    pub horizon: usize,
}

impl GridRow {
    pub const fn new(na: usize, nb: usize, horizon: usize) -> Self {
        Self { na, nb, horizon }
    }

    /// The same horizon without delays.
    pub fn undelayed(self) -> Self {
        Self::new(0, 0, self.horizon)
    }
}

pub const DELAY_SWEEP: [GridRow; 5] = [
    GridRow::new(8, 4, 13),
    GridRow::new(16, 8, 21),
    GridRow::new(24, 12, 29),
    GridRow::new(32, 16, 37),
    GridRow::new(40, 20, 45),
];

/// Parses `sweep`, `sweep-nodelay`, an empty string, or rows
/// `na,nb,T` separated by `;`.
pub fn parse_grid(spec: &str) -> Result<Vec<GridRow>> {
    match spec.trim() {
        "sweep" => Ok(DELAY_SWEEP.to_vec()),
        "sweep-nodelay" => Ok(DELAY_SWEEP.iter().map(|r| r.undelayed()).collect()),
        "" => Ok(Vec::new()),
        rows => rows
            .split(';')
            .filter(|r| !r.trim().is_empty())
            .map(|r| {
                let bad = || Error::InvalidArgument(format!("grid row `{r}` is not `na,nb,T`"));
                let v = r
                    .split(',')
                    .map(|x| usize::from_str(x.trim()).map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                match v[..] {
                    [na, nb, t] if t > 0 => Ok(GridRow::new(na, nb, t)),
                    _ => Err(bad()),
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Optimal,
    Infeasible,
    SolverFailure,
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::Infeasible => "infeasible",
            Self::SolverFailure => "solver_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub row: GridRow,
    pub trial: usize,
    pub status: TrialStatus,
    pub n_vars: usize,
    pub n_cons: usize,
    pub t_assemble_s: f64,
    pub t_solve_s: f64,
}

/// Generator stream for one trial; depends only on the row and trial, so
/// a row draws the same systems whatever grid it appears in.
fn trial_stream(row: GridRow, trial: usize) -> u64 {
    let mut s = row.na as u64;
    for v in [row.nb, row.horizon, trial] {
        s = s.wrapping_mul(1_000_003).wrapping_add(v as u64);
    }
    s
}

pub fn run_trial(row: GridRow, trial: usize, seed: u64, options: &SynthesisOptions) -> Result<TrialRecord> {
    let mut rng = run_rng(seed, trial_stream(row, trial));
    let problem = random_scalability(row.na, row.nb, row.horizon, &mut rng);
    let (status, stats): (_, SolverStats) = match solve_ocp(&problem, options) {
        Ok(r) => (TrialStatus::Optimal, r.solver_stats),
        Err(Error::Infeasible(s)) => (TrialStatus::Infeasible, *s),
        Err(Error::SolverFailure(s)) => (TrialStatus::SolverFailure, *s),
        Err(e) => return Err(e),
    };
    Ok(TrialRecord {
        row,
        trial,
        status,
        n_vars: stats.n_vars,
        n_cons: stats.n_eq + stats.n_ineq,
        t_assemble_s: stats.assemble_time,
        t_solve_s: stats.solve_time,
    })
}

/// Runs `trials` random systems per row on the current rayon pool; records
/// come back in grid order.
pub fn run_bench(grid: &[GridRow], trials: usize, seed: u64, options: &SynthesisOptions) -> Result<Vec<TrialRecord>> {
    let jobs: Vec<_> = grid
        .iter()
        .flat_map(|&row| (0..trials).map(move |t| (row, t)))
        .collect();
    jobs.into_par_iter()
        .map(|(row, t)| run_trial(row, t, seed, options))
        .collect()
}

pub const CSV_HEADER: &str = "na,nb,T,trial,status,n_vars,n_cons,t_assemble_s,t_solve_s";

pub fn bench_csv(records: &[TrialRecord], header: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        writeln!(out, "{h}").unwrap();
    }
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            r.row.na,
            r.row.nb,
            r.row.horizon,
            r.trial,
            r.status.as_str(),
            r.n_vars,
            r.n_cons,
            r.t_assemble_s,
            r.t_solve_s
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: GridRow,
    pub trials: usize,
    pub optimal: usize,
    pub median_solve_s: f64,
    pub n_vars: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-row statistics over all trials, in first-appearance order.
pub fn summarize(records: &[TrialRecord]) -> Vec<RowSummary> {
    let mut rows: Vec<GridRow> = Vec::new();
    for r in records {
        if !rows.contains(&r.row) {
            rows.push(r.row);
        }
    }
    rows.into_iter()
        .map(|row| {
            let mine: Vec<_> = records.iter().filter(|r| r.row == row).collect();
            RowSummary {
                row,
                trials: mine.len(),
                optimal: mine.iter().filter(|r| r.status == TrialStatus::Optimal).count(),
                median_solve_s: median(mine.iter().map(|r| r.t_solve_s).collect()),
                n_vars: mine.first().map_or(0, |r| r.n_vars),
            }
        })
        .collect()
}
