use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use riskmm::corridor::{CorridorConfig, CorridorSetup, Quartiles, N_U, N_X};
use riskmm::mm::{ClosedLoopTrace, MMStatus};
use riskmm::oracle::{run_verify, Mutation, VerifyOptions};
use riskmm::par::{self, Execution};
use riskmm::{Error, Formulation};

mod config;
mod svg;

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn solver(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InfeasibleState(_) => Failure::config(e.to_string()),
            _ => Failure::solver(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "riskmm", version, about = "Risk-sensitive MPC on the corridor benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One open-loop MM solve from the configured state; writes solve.csv.
    Solve(Common),
    /// Closed-loop runs over `repeats` seeds; writes trace.csv and metrics.csv.
    Simulate(Common),
    /// Closed-loop runs per (formulation, gamma); writes sweep.csv and sweep.svg.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gamma list (replaces sweep.gammas).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        gammas: Option<Vec<f64>>,
    },
    /// Run the verification suite; writes verify.json.
    Verify {
        /// Run a single check group.
        #[arg(long)]
        only: Option<String>,
        /// Inject a known defect (currently: pi-sign).
        #[arg(long)]
        mutate: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    formulation: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "Nb")]
    n_b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override any config field, e.g. `--set human.v_x_mps=0`.
    #[arg(long = "set", value_parser = config::parse_assignment)]
    set: Vec<(String, String)>,
    /// Record wall-clock columns (otherwise written as 0 for reproducible files).
    #[arg(long)]
    timing: bool,
}

impl Common {
    fn load(&self) -> Result<CorridorConfig, Failure> {
        let mut overrides = Vec::new();
        if let Some(f) = &self.formulation {
            let f: Formulation = f.parse().map_err(|e: Error| Failure::config(e.to_string()))?;
            overrides.push(("risk.formulation".to_string(), format!("\"{}\"", f.name())));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("risk.gamma", self.gamma.map(|v| v.to_string()));
        push("horizon.n", self.n.map(|v| v.to_string()));
        push("horizon.n_b", self.n_b.map(|v| v.to_string()));
        push("simulate.seed", self.seed.map(|v| v.to_string()));
        push("simulate.steps", self.steps.map(|v| v.to_string()));
        push("simulate.repeats", self.repeats.map(|v| v.to_string()));
        overrides.extend(self.set.iter().cloned());
        config::load(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        fs::create_dir_all(&self.out).map_err(Failure::io)?;
        Ok(&self.out)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Failure> {
    csv::Writer::from_path(path).map_err(Failure::io)
}

fn write_row<I, S>(w: &mut csv::Writer<fs::File>, row: I) -> Result<(), Failure>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(Failure::io)
}

fn timing(enabled: bool, ms: f64) -> String {
    if enabled { ms.to_string() } else { "0".into() }
}

fn cmd_solve(c: &Common) -> Result<(), Failure> {
    let setup = CorridorSetup::new(c.load()?)?;
    let out = c.out_dir()?;
    let result = setup.solve();
    let mut w = csv_writer(&out.join("solve.csv"))?;
    write_row(&mut w, ["m", "loss", "optimality_error", "inner_iters", "wall_ms"])?;
    let report = match &result {
        Ok((_, r)) => r,
        Err(_) => {
            w.flush().map_err(Failure::io)?;
            return Err(result.unwrap_err().into());
        }
    };
    for r in &report.records {
        write_row(
            &mut w,
            [
                r.m.to_string(),
                r.loss.to_string(),
                r.optimality_error.to_string(),
                r.inner_iters.to_string(),
                timing(c.timing, r.wall_ms),
            ],
        )?;
    }
    w.flush().map_err(Failure::io)?;
    println!(
        "{} gamma={} status={:?} mm_iterations={} loss={:.6} E[L]={:.6} optimality_error={:.3e}",
        setup.config.risk.formulation.name(),
        setup.config.risk.gamma,
        report.status,
        report.mm_iterations(),
        report.final_loss(),
        report.expected_loss,
        report.final_optimality_error()
    );
    if report.status == MMStatus::InnerFailure {
        return Err(Failure::solver("inner solver failed; solve.csv holds the iterations up to the failure"));
    }
    Ok(())
}

fn run_seeds(setup: &CorridorSetup) -> Vec<(u64, riskmm::Result<ClosedLoopTrace>)> {
    let base = setup.config.simulate.seed;
    let seeds: Vec<u64> = (0..setup.config.simulate.repeats as u64).map(|i| base + i).collect();
    let traces = par::map(Execution::Parallel, &seeds, |&s| setup.simulate(s));
    seeds.into_iter().zip(traces).collect()
}

fn cmd_simulate(c: &Common) -> Result<(), Failure> {
    let setup = CorridorSetup::new(c.load()?)?;
    let out = c.out_dir()?;
    let runs = run_seeds(&setup);

    let mut w = csv_writer(&out.join("trace.csv"))?;
    let mut header: Vec<String> = vec!["step".into()];
    header.extend(["p_x", "p_y", "v_x", "v_y", "p_x_h", "p_y_h", "one"].map(String::from));
    header.extend(["u_x", "u_y", "sampled_mode", "solve_ms"].map(String::from));
    debug_assert_eq!(header.len(), 1 + N_X + N_U + 2);
    write_row(&mut w, &header)?;
    if let Some((_, Ok(tr))) = runs.first() {
        for (k, u) in tr.inputs.iter().enumerate() {
            let mut row: Vec<String> = vec![k.to_string()];
            row.extend(tr.states[k].iter().map(|v| v.to_string()));
            row.extend(u.iter().map(|v| v.to_string()));
            row.push((tr.modes[k] + 1).to_string());
            row.push(timing(c.timing, tr.solve_ms[k]));
            write_row(&mut w, &row)?;
        }
    }
    w.flush().map_err(Failure::io)?;

    let mut w = csv_writer(&out.join("metrics.csv"))?;
    write_row(&mut w, ["seed", "AVTE", "min_distance", "collisions"])?;
    let mut failures = Vec::new();
    for (seed, run) in &runs {
        match run {
            Ok(tr) => match &tr.metrics {
                Some(m) => write_row(
                    &mut w,
                    [seed.to_string(), m.avte.to_string(), m.min_distance.to_string(), m.collisions.to_string()],
                )?,
                None => write_row(&mut w, [seed.to_string(), String::new(), String::new(), String::new()])?,
            },
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    w.flush().map_err(Failure::io)?;

    let ok: Vec<_> = runs
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().and_then(|t| t.metrics))
        .collect();
    if !ok.is_empty() {
        let n = ok.len() as f64;
        println!(
            "{} runs: mean AVTE {:.3}, mean min_distance {:.3}, collisions {}",
            ok.len(),
            ok.iter().map(|m| m.avte).sum::<f64>() / n,
            ok.iter().map(|m| m.min_distance).sum::<f64>() / n,
            ok.iter().map(|m| m.collisions).sum::<usize>()
        );
    }
    if !failures.is_empty() {
        return Err(Failure::solver(failures.join("; ")));
    }
    Ok(())
}

fn cmd_sweep(c: &Common, gammas: Option<&[f64]>) -> Result<(), Failure> {
    let mut cfg = c.load()?;
    if let Some(g) = gammas {
        cfg.sweep.gammas = g.to_vec();
    }
    if c.formulation.is_some() {
        cfg.sweep.formulations = vec![cfg.risk.formulation];
    }
    if cfg.sweep.gammas.is_empty() {
        return Err(Failure::config("the gamma list is empty"));
    }
    if cfg.sweep.gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Failure::config("gamma values must be positive"));
    }
    if cfg.sweep.formulations.is_empty() {
        return Err(Failure::config("the formulation list is empty"));
    }
    let out = c.out_dir()?;
    let mut w = csv_writer(&out.join("sweep.csv"))?;
    write_row(
        &mut w,
        [
            "formulation",
            "gamma",
            "n_runs",
            "avte_q1",
            "avte_median",
            "avte_q3",
            "min_distance_q1",
            "min_distance_median",
            "min_distance_q3",
            "failures",
        ],
    )?;
    let mut cells = Vec::new();
    let mut total_failures = 0;
    let names: Vec<String> = cfg.sweep.formulations.iter().map(|f| f.name().to_string()).collect();
    for (series, &f) in cfg.sweep.formulations.iter().enumerate() {
        for &g in &cfg.sweep.gammas {
            let mut cell_cfg = cfg.clone();
            cell_cfg.risk.formulation = f;
            cell_cfg.risk.gamma = g;
            let setup = CorridorSetup::new(cell_cfg)?;
            let runs = run_seeds(&setup);
            let metrics: Vec<_> = runs
                .iter()
                .filter_map(|(_, r)| r.as_ref().ok().and_then(|t| t.metrics))
                .collect();
            let failures = runs.len() - metrics.len();
            total_failures += failures;
            let avte = Quartiles::of(&metrics.iter().map(|m| m.avte).collect::<Vec<_>>());
            let dist = Quartiles::of(&metrics.iter().map(|m| m.min_distance).collect::<Vec<_>>());
            let q = |q: Option<Quartiles>| match q {
                Some(q) => [q.q1.to_string(), q.median.to_string(), q.q3.to_string()],
                None => [String::new(), String::new(), String::new()],
            };
            let mut row = vec![f.name().to_string(), g.to_string(), metrics.len().to_string()];
            row.extend(q(avte));
            row.extend(q(dist));
            row.push(failures.to_string());
            write_row(&mut w, &row)?;
            w.flush().map_err(Failure::io)?;
            if let (Some(avte), Some(min_distance)) = (avte, dist) {
                println!(
                    "{} gamma={g}: median AVTE {:.3}, median min_distance {:.3}",
                    f.name(),
                    avte.median,
                    min_distance.median
                );
                cells.push(svg::Cell {
                    label: format!("{g:e}"),
                    series,
                    avte,
                    min_distance,
                });
            }
        }
    }
    fs::write(out.join("sweep.svg"), svg::render(&cells, &names)).map_err(Failure::io)?;
    if total_failures > 0 {
        return Err(Failure::solver(format!("{total_failures} closed-loop runs failed")));
    }
    Ok(())
}

fn cmd_verify(only: Option<String>, mutate: Option<String>, seed: u64, out: &Path) -> Result<(), Failure> {
    let mutation = match mutate.as_deref() {
        None => None,
        Some("pi-sign" | "pi_sign") => Some(Mutation::PiSign),
        Some(other) => return Err(Failure::config(format!("unknown mutation {other:?}; expected pi-sign"))),
    };
    let report = run_verify(&VerifyOptions {
        only,
        mutation,
        exec: Execution::Parallel,
        seed,
    })?;
    fs::create_dir_all(out).map_err(Failure::io)?;
    let json = serde_json::to_string_pretty(&report).map_err(Failure::io)?;
    fs::write(out.join("verify.json"), json + "\n").map_err(Failure::io)?;
    for c in &report.checks {
        println!(
            "{} [{}] {} (max violation {:.3e}, tolerance {:.1e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.group,
            c.name,
            c.max_violation,
            c.tolerance
        );
    }
    if !report.passed {
        return Err(Failure {
            code: 1,
            message: "verification failed".into(),
        });
    }
    Ok(())
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("RISKMM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let result = match &cli.command {
        Command::Solve(c) => cmd_solve(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::SweepGamma { common, gammas } => cmd_sweep(common, gammas.as_deref()),
        Command::Verify {
            only,
            mutate,
            seed,
            out,
        } => cmd_verify(only.clone(), mutate.clone(), *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("riskmm: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
