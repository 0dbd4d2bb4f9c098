use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hvmp_core::harness::config::{ConfigMap, RunConfig};
use hvmp_core::harness::instance::{config_for, gen_instance, load_bundle, save_bundle};
use hvmp_core::harness::sweep::{
    bench_cells, phase_cells, read_csv, run_cells_resumable, solve_instance, stream, summarize, summary_json,
    write_csv, TrialResult,
};
use hvmp_core::verify::{run_all, VerifyOptions};
use hvmp_core::HvmpError;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAILED_TRIALS: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "hvmp", version, about = "Bilinear factorization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run `trials` seeded trials of one configuration.
    Run(Common),
    /// Phase-transition sweep over `sweep.rho_grid` × `sweep.k_grid`.
    Sweep(Common),
    /// Time to reach `bench.target_db` for each K in `bench.k_grid`.
    Bench(Common),
    /// Run the oracle suites and print a pass/fail table.
    Verify(Common),
    /// Write one synthetic instance as a bundle directory.
    Gen(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set t_max=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output file (CSV) or directory (`gen`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; replaces the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Skip grid cells already complete in the output CSV.
    #[arg(long)]
    resume: bool,
    /// Solve a saved instance bundle instead of generating one (`run`).
    #[arg(long)]
    instance: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Trials(usize),
    Verify,
}

impl From<HvmpError> for Failure {
    fn from(e: HvmpError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load_config(c: &Common) -> Result<(ConfigMap, RunConfig), Failure> {
    let mut map = ConfigMap::default();
    if let Some(path) = &c.config {
        if !path.is_file() {
            return Err(Failure::Config(format!("config file {} not found", path.display())));
        }
        map.merge_file(path)?;
    }
    for o in &c.overrides {
        map.apply_override(o)?;
    }
    if let Some(seed) = c.seed {
        map.apply_override(&format!("seed={seed}"))?;
    }
    let cfg = map.to_run_config()?;
    Ok((map, cfg))
}

fn write_outputs(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    map: &ConfigMap,
    rows: &[TrialResult],
    target: Option<f64>,
) -> Result<(), Failure> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    }
    write_csv(out, rows)?;
    let summary = summary_json(command, cfg, map.echo(), rows, target);
    let json_path = out.with_extension("json");
    let text = serde_json::to_string_pretty(&summary).expect("summary is plain JSON");
    std::fs::write(&json_path, text).map_err(|e| Failure::Config(format!("{}: {e}", json_path.display())))?;
    println!("wrote {} and {}", out.display(), json_path.display());
    Ok(())
}

fn report(rows: &[TrialResult], bench: bool) -> Result<(), Failure> {
    for s in summarize(rows) {
        if bench {
            match s.median_wall_ms {
                Some(ms) => println!(
                    "rho={} K={}: reached {}/{}  median {:.1} ms",
                    s.rho, s.k, s.reached, s.trials, ms
                ),
                None => println!("rho={} K={}: unreached (0/{})", s.rho, s.k, s.trials),
            }
        } else {
            println!(
                "rho={} K={}: median NMSE(X) {:.2} dB  NMSE(S) {:.2} dB  failed {}/{}",
                s.rho, s.k, s.median_nmse_x_db, s.median_nmse_s_db, s.failed, s.trials
            );
        }
    }
    let failed = rows.iter().filter(|r| r.failed()).count();
    for r in rows.iter().filter(|r| r.failed()) {
        eprintln!(
            "trial {} (rho={}, K={}, seed {}) failed: {}",
            r.trial,
            r.rho,
            r.k,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    if failed > 0 {
        Err(Failure::Trials(failed))
    } else {
        Ok(())
    }
}

fn previous_rows(c: &Common, out: &Path) -> Result<Vec<TrialResult>, Failure> {
    if c.resume && out.is_file() {
        let rows = read_csv(out)?;
        println!("resuming from {} ({} rows)", out.display(), rows.len());
        Ok(rows)
    } else {
        Ok(Vec::new())
    }
}

fn cmd_run(c: &Common) -> Result<(), Failure> {
    let (map, cfg) = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("run.csv"));
    let rows = if let Some(dir) = &c.instance {
        let (inst, manifest) = load_bundle(dir)?;
        let cfg = config_for(&cfg, &manifest);
        println!("solving instance {} (seed {})", dir.display(), inst.seed);
        vec![solve_instance(&cfg, &inst, 0, None)]
    } else {
        let cells = phase_cells(&cfg, &[cfg.rho], &[cfg.k])?;
        let (rows, _) = run_cells_resumable(&cells, cfg.seed, cfg.trials, None, c.jobs, &[])?;
        rows
    };
    for r in &rows {
        println!(
            "trial {} seed {}: NMSE(X) {:.2} dB  NMSE(S) {:.2} dB  {} iters  {:.0} ms",
            r.trial, r.seed, r.nmse_x_db, r.nmse_s_db, r.iters, r.wall_ms
        );
    }
    write_outputs(&out, "run", &cfg, &map, &rows, None)?;
    report(&rows, false)
}

fn cmd_sweep(c: &Common) -> Result<(), Failure> {
    let (map, cfg) = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let cells = phase_cells(&cfg, &cfg.rho_grid, &cfg.k_grid)?;
    println!("{} cells x {} trials", cells.len(), cfg.trials);
    let previous = previous_rows(c, &out)?;
    let (rows, skipped) = run_cells_resumable(&cells, cfg.seed, cfg.trials, None, c.jobs, &previous)?;
    if skipped > 0 {
        println!("skipped {skipped} completed cells");
    }
    write_outputs(&out, "sweep", &cfg, &map, &rows, None)?;
    report(&rows, false)
}

fn cmd_bench(c: &Common) -> Result<(), Failure> {
    let (map, cfg) = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("bench.csv"));
    let cells = bench_cells(&cfg, &cfg.bench_k_grid)?;
    let target = Some(cfg.bench_target_db);
    let previous = previous_rows(c, &out)?;
    let (rows, _) = run_cells_resumable(&cells, cfg.seed, cfg.trials, target, c.jobs, &previous)?;
    write_outputs(&out, "bench", &cfg, &map, &rows, target)?;
    report(&rows, true)
}

fn cmd_verify(c: &Common) -> Result<(), Failure> {
    let mut opts = VerifyOptions::default();
    if let Some(seed) = c.seed {
        opts.seed = seed;
    }
    let report = run_all(&opts);
    print!("{}", report.table());
    if report.passed() {
        println!("all {} suites passed", report.suites.len());
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cmd_gen(c: &Common) -> Result<(), Failure> {
    let (map, cfg) = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("instance"));
    let inst = gen_instance(&cfg, cfg.seed, &mut stream(cfg.seed, 0))?;
    let m = save_bundle(&inst, &out, map.echo())?;
    println!(
        "wrote {} (L={} K={} T={} N={} seed {} sigma2 {:e})",
        out.display(),
        m.l,
        m.k,
        m.t,
        m.n,
        m.seed,
        m.sigma2
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Bench(c) => cmd_bench(c),
        Command::Verify(c) => cmd_verify(c),
        Command::Gen(c) => cmd_gen(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Trials(n)) => {
            eprintln!("{n} trial(s) failed");
            ExitCode::from(EXIT_FAILED_TRIALS)
        }
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
