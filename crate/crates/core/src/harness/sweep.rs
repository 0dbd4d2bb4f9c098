//! Trials, phase-transition sweeps and runtime benchmarks.
//!
//! Every trial is a pure function of `(config, seed)`. Seeds are derived
//! from `(master seed, cell index, trial index)`, so the work pool may run
//! trials in any order; results are merged back by index.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{HvmpError, Result};
use crate::harness::config::RunConfig;
use crate::harness::instance::{gen_instance, Instance};
use crate::harness::metrics::nmse_db;
use crate::hvmp::run;

/// Engine failures are retried with a fresh initialization this many times.
pub const MAX_RESEEDS: usize = 3;

/// Relative change of `X̂` below which a run without a stop rule counts as
/// converged.
pub const SETTLED_TOL: f64 = 1e-4;

pub const CSV_HEADER: [&str; 13] = [
    "rho",
    "K",
    "L",
    "T",
    "N",
    "snr_db",
    "seed",
    "trial",
    "nmse_x_db",
    "nmse_s_db",
    "iters",
    "wall_ms",
    "converged",
];

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial `trial` in grid cell `cell`.
pub fn trial_seed(master: u64, cell: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ cell as u64) ^ trial as u64)
}

/// Independent stream `index` derived from `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub rho: f64,
    pub k: usize,
    pub l: usize,
    pub t: usize,
    pub n: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub trial: usize,
    pub nmse_x_db: f64,
    pub nmse_s_db: f64,
    pub iters: usize,
    pub wall_ms: f64,
    /// Benchmark mode: the target was reached. Otherwise: the stop rule
    /// fired or the last relative change of `X̂` was below [`SETTLED_TOL`].
    pub converged: bool,
    pub reseeds: usize,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.rho.to_string(),
            self.k.to_string(),
            self.l.to_string(),
            self.t.to_string(),
            self.n.to_string(),
            self.snr_db.to_string(),
            self.seed.to_string(),
            self.trial.to_string(),
            self.nmse_x_db.to_string(),
            self.nmse_s_db.to_string(),
            self.iters.to_string(),
            format!("{:.3}", self.wall_ms),
            self.converged.to_string(),
        ]
    }
}

/// Runs one trial: instance from stream 0 of `seed`, engine initialization
/// from stream `1 + attempt`.
pub fn run_trial(cfg: &RunConfig, seed: u64, trial: usize, bench_target: Option<f64>) -> TrialResult {
    match gen_instance(cfg, seed, &mut stream(seed, 0)) {
        Ok(inst) => solve_instance(cfg, &inst, trial, bench_target),
        Err(e) => failed_result(cfg, seed, trial, 0, e),
    }
}

fn failed_result(cfg: &RunConfig, seed: u64, trial: usize, reseeds: usize, e: HvmpError) -> TrialResult {
    TrialResult {
        rho: cfg.rho,
        k: cfg.k,
        l: cfg.l,
        t: cfg.t,
        n: cfg.total_n(),
        snr_db: cfg.snr_db,
        seed,
        trial,
        nmse_x_db: f64::NAN,
        nmse_s_db: f64::NAN,
        iters: 0,
        wall_ms: 0.0,
        converged: false,
        reseeds,
        error: Some(e.to_string()),
    }
}

/// Runs the engine on a given instance, retrying failed runs.
pub fn solve_instance(cfg: &RunConfig, inst: &Instance, trial: usize, bench_target: Option<f64>) -> TrialResult {
    let seed = inst.seed;
    let problem = match cfg.prior_s().and_then(|ps| inst.problem(ps, cfg.prior_x)) {
        Ok(p) => p,
        Err(e) => return failed_result(cfg, seed, trial, 0, e),
    };
    let mut last_err = None;
    for attempt in 0..=MAX_RESEEDS {
        let start = Instant::now();
        let mut reached = false;
        let outcome = run(
            &problem,
            &cfg.engine,
            cfg.t_max,
            &mut stream(seed, 1 + attempt as u64),
            cfg.stop_rule(),
            |st| match bench_target {
                Some(target) => {
                    reached = nmse_db(&st.x_hat, &inst.x, cfg.x_mode).is_ok_and(|v| v <= target);
                    reached
                }
                None => false,
            },
        );
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => return failed_result(cfg, seed, trial, attempt, e),
        };
        if let Some(e) = outcome.error {
            last_err = Some(e);
            continue;
        }
        let metrics = nmse_db(&outcome.state.x_hat, &inst.x, cfg.x_mode)
            .and_then(|x| Ok((x, nmse_db(&outcome.state.s_hat, &inst.s, cfg.s_mode)?)));
        let (nmse_x_db, nmse_s_db) = match metrics {
            Ok(m) => m,
            Err(e) => return failed_result(cfg, seed, trial, attempt, e),
        };
        let converged = match bench_target {
            Some(_) => reached,
            None => outcome.stopped_early || outcome.trajectory.last().is_some_and(|r| r.x_change < SETTLED_TOL),
        };
        return TrialResult {
            rho: cfg.rho,
            k: cfg.k,
            l: cfg.l,
            t: cfg.t,
            n: cfg.total_n(),
            snr_db: cfg.snr_db,
            seed,
            trial,
            nmse_x_db,
            nmse_s_db,
            iters: outcome.trajectory.len(),
            wall_ms,
            converged,
            reseeds: attempt,
            error: None,
        };
    }
    failed_result(
        cfg,
        seed,
        trial,
        MAX_RESEEDS,
        last_err.unwrap_or_else(|| HvmpError::Numeric("engine failed".into())),
    )
}

/// One grid cell: the configuration it runs and its position.
#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub cfg: RunConfig,
}

/// Cells of the `(ρ, K)` grid, ρ-major.
pub fn phase_cells(template: &RunConfig, rho_grid: &[f64], k_grid: &[usize]) -> Result<Vec<Cell>> {
    if rho_grid.is_empty() || k_grid.is_empty() {
        return Err(HvmpError::Config("sweep grids must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &rho in rho_grid {
        for &k in k_grid {
            let cfg = RunConfig {
                rho,
                k,
                ..template.clone()
            };
            cfg.validate()?;
            cells.push(Cell {
                index: cells.len(),
                cfg,
            });
        }
    }
    Ok(cells)
}

/// Cells of the runtime benchmark, one per `K`.
pub fn bench_cells(template: &RunConfig, k_grid: &[usize]) -> Result<Vec<Cell>> {
    phase_cells(template, &[template.rho], k_grid)
}

/// Runs `trials` seeded trials in each cell on a pool of `jobs` workers
/// (0 means all cores). Output is ordered by cell, then trial.
pub fn run_cells(
    cells: &[Cell],
    master_seed: u64,
    trials: usize,
    bench_target: Option<f64>,
    jobs: usize,
) -> Result<Vec<TrialResult>> {
    let tasks: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|c| (0..trials).map(move |t| (c.index, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HvmpError::Config(format!("cannot build worker pool: {e}")))?;
    let by_index = |i: usize| cells.iter().find(|c| c.index == i).expect("task refers to a cell");
    Ok(pool.install(|| {
        tasks
            .par_iter()
            .map(|&(cell, trial)| {
                let c = by_index(cell);
                run_trial(&c.cfg, trial_seed(master_seed, cell, trial), trial, bench_target)
            })
            .collect()
    }))
}

/// Aggregate of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub rho: f64,
    pub k: usize,
    pub trials: usize,
    pub failed: usize,
    pub median_nmse_x_db: f64,
    pub mean_nmse_x_db: f64,
    pub median_nmse_s_db: f64,
    pub reached: usize,
    /// Median wall time over trials that reached the target; `None` marks
    /// an unreached cell.
    pub median_wall_ms: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-cell aggregates, in order of first appearance of `(ρ, K)`.
pub fn summarize(results: &[TrialResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(f64, usize)> = Vec::new();
    for r in results {
        if !keys.iter().any(|&(rho, k)| rho == r.rho && k == r.k) {
            keys.push((r.rho, r.k));
        }
    }
    keys.into_iter()
        .map(|(rho, k)| {
            let rows: Vec<&TrialResult> = results.iter().filter(|r| r.rho == rho && r.k == k).collect();
            let xs: Vec<f64> = rows.iter().map(|r| r.nmse_x_db).collect();
            let ss: Vec<f64> = rows.iter().map(|r| r.nmse_s_db).collect();
            let finite: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
            let wall: Vec<f64> = rows.iter().filter(|r| r.converged).map(|r| r.wall_ms).collect();
            CellSummary {
                rho,
                k,
                trials: rows.len(),
                failed: rows.iter().filter(|r| r.failed()).count(),
                median_nmse_x_db: median(&xs),
                mean_nmse_x_db: if finite.is_empty() {
                    f64::NAN
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                median_nmse_s_db: median(&ss),
                reached: wall.len(),
                median_wall_ms: (!wall.is_empty()).then(|| median(&wall)),
            }
        })
        .collect()
}

/// Number of adjacent decreases in `values` (NaN pairs are skipped).
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

pub fn write_csv(path: &Path, results: &[TrialResult]) -> Result<()> {
    let io = |e: csv::Error| HvmpError::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in results {
        w.write_record(r.csv_record()).map_err(io)?;
    }
    w.flush().map_err(|source| HvmpError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads rows written by [`write_csv`]; the `error` field is not stored,
/// so failed rows come back with a placeholder message.
pub fn read_csv(path: &Path) -> Result<Vec<TrialResult>> {
    let bad = |m: String| HvmpError::Config(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != CSV_HEADER {
        return Err(bad("unexpected CSV header".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("row {}: bad number `{}`", line + 2, &rec[i])))
        };
        let u = |i: usize| -> Result<u64> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("row {}: bad integer `{}`", line + 2, &rec[i])))
        };
        let nmse_x_db = f(8)?;
        out.push(TrialResult {
            rho: f(0)?,
            k: u(1)? as usize,
            l: u(2)? as usize,
            t: u(3)? as usize,
            n: u(4)? as usize,
            snr_db: f(5)?,
            seed: u(6)?,
            trial: u(7)? as usize,
            nmse_x_db,
            nmse_s_db: f(9)?,
            iters: u(10)? as usize,
            wall_ms: f(11)?,
            converged: &rec[12] == "true",
            reseeds: 0,
            error: nmse_x_db.is_nan().then(|| "failed in an earlier run".to_string()),
        });
    }
    Ok(out)
}

/// Runs the cells not already complete in `previous`, then merges old and
/// new rows in cell/trial order.
pub fn run_cells_resumable(
    cells: &[Cell],
    master_seed: u64,
    trials: usize,
    bench_target: Option<f64>,
    jobs: usize,
    previous: &[TrialResult],
) -> Result<(Vec<TrialResult>, usize)> {
    let matches = |c: &Cell, r: &TrialResult| {
        r.rho == c.cfg.rho && r.k == c.cfg.k && r.seed == trial_seed(master_seed, c.index, r.trial)
    };
    let mut done = BTreeSet::new();
    for c in cells {
        let have: BTreeSet<usize> = previous.iter().filter(|r| matches(c, r)).map(|r| r.trial).collect();
        if (0..trials).all(|t| have.contains(&t)) {
            done.insert(c.index);
        }
    }
    let todo: Vec<Cell> = cells.iter().filter(|c| !done.contains(&c.index)).cloned().collect();
    let fresh = run_cells(&todo, master_seed, trials, bench_target, jobs)?;
    let mut merged = Vec::new();
    for c in cells {
        for t in 0..trials {
            let source: &[TrialResult] = if done.contains(&c.index) { previous } else { &fresh };
            if let Some(r) = source.iter().find(|r| matches(c, r) && r.trial == t) {
                merged.push(r.clone());
            }
        }
    }
    Ok((merged, done.len()))
}

/// `git describe --always --dirty`, or `"unknown"` outside a checkout.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Summary document written next to every CSV.
pub fn summary_json(
    command: &str,
    cfg: &RunConfig,
    echo: serde_json::Value,
    results: &[TrialResult],
    bench_target: Option<f64>,
) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "git_describe": git_describe(),
        "config": echo,
        "noise": "sigma2 = ||A vec(SX)||^2 / (N 10^(snr_db/10)) per instance",
        "metric": { "x_mode": cfg.x_mode.as_str(), "s_mode": cfg.s_mode.as_str() },
        "bench_target_db": bench_target,
        "trials": results.len(),
        "failed": results.iter().filter(|r| r.failed()).count(),
        "errors": results.iter().filter_map(|r| r.error.as_ref().map(|e| {
            serde_json::json!({ "rho": r.rho, "K": r.k, "trial": r.trial, "error": e })
        })).collect::<Vec<_>>(),
        "cells": summarize(results),
    })
}
