//! Command-line front end: classification, offline solves, single online
//! runs, Monte-Carlo experiments, benchmarks and report rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimo_lqr::harness::{
    bench_cpu, load_scenario, load_thresholds, metrics_csv, reference_kernel, report,
    run_experiment, run_seed, run_single, solver_seed, timing_csv, trace_csv, Scheme,
    ScenarioConfig, Thresholds,
};
use mimo_lqr::nme::{average_cost, existence_condition, solve_fixed_point};
use mimo_lqr::numerics;
use mimo_lqr::{controllability, Result};

#[derive(Parser)]
#[command(name = "mimo-lqr", version, about = "LQR control over random-access MIMO fading channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Scenario file; falls back to a bundled scenario of the same name
    /// (fig3.cfg, fig4.cfg, fig5_S4..12.cfg, fig6_Nt2..6.cfg, fig7_Nr2..6.cfg).
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Override the scenario's run count.
    #[arg(long)]
    runs: Option<usize>,
}

impl CommonOpts {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = load_scenario(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(horizon) = self.horizon {
            cfg.horizon = horizon;
        }
        if let Some(runs) = self.runs {
            cfg.runs = runs;
        }
        Ok(cfg)
    }
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    Scheme::from_label(s).ok_or_else(|| format!("unknown scheme {s:?}; expected proposed, b1, b2 or b3"))
}

#[derive(Subcommand)]
enum Command {
    /// Decide the closed-loop controllability regime of a scenario.
    Classify {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Solve the value-kernel fixed point offline on a frozen sample set.
    Solve {
        #[command(flatten)]
        common: CommonOpts,
        /// Write the solved kernel as CSV rows.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One online learning run; per-slot trajectory CSV.
    Learn {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One baseline run (b1, b2 or b3); per-slot trajectory CSV.
    Baseline {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo experiment over schemes and seeds; aggregated CSV.
    Run {
        #[command(flatten)]
        common: CommonOpts,
        /// Restrict to one scheme (default: all four).
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock benchmark over one or more scenarios.
    Bench {
        /// Scenario files (repeatable), e.g. the fig5/fig6/fig7 sweeps.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize experiment CSV files against pass/fail thresholds.
    Report {
        /// Metrics CSV files produced by `run`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// TOML file overriding the default thresholds.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn schemes_or_all(scheme: Option<Scheme>) -> Vec<Scheme> {
    match scheme {
        Some(s) => vec![s],
        None => Scheme::ALL.to_vec(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Classify { common } => {
            let cfg = common.load()?;
            let verdict =
                controllability::classify(&cfg.plant, &cfg.channel, &cfg.tol)?;
            println!("scenario:  {}", cfg.name);
            println!("regime:    {}", verdict.regime);
            println!("condition: {}", verdict.matched_condition);
            println!("details:   {}", verdict.details);
        }
        Command::Solve { common, out } => {
            let cfg = common.load()?;
            let cert = existence_condition(
                &cfg.plant,
                &cfg.weights,
                &cfg.channel,
                cfg.sample_count.max(100),
                solver_seed(cfg.master_seed),
            )?;
            println!(
                "existence condition: estimate {:.6} +- {:.6} ({})",
                cert.estimate, cert.ci_halfwidth, cert.satisfied
            );
            let rep = solve_fixed_point(
                &cfg.plant,
                &cfg.weights,
                &cfg.channel,
                cfg.xi,
                cfg.sample_count,
                solver_seed(cfg.master_seed),
            )?;
            println!(
                "fixed point: converged={} iterations={} residual={:.3e}",
                rep.converged, rep.iterations, rep.residual_norm
            );
            println!("kernel norm: {:.6}", numerics::spectral_norm(&rep.p_star.p));
            println!(
                "average cost: {:.6}",
                average_cost(&rep.p_star, &cfg.plant, &cfg.weights)
            );
            if let Some(note) = &rep.note {
                println!("note: {note}");
            }
            if out.is_some() {
                let s = cfg.plant.state_dim();
                let mut text = String::new();
                for i in 0..s {
                    let row: Vec<String> =
                        (0..s).map(|j| format!("{}", rep.p_star.p[(i, j)])).collect();
                    text.push_str(&row.join(","));
                    text.push('\n');
                }
                emit(&out, &text)?;
            }
        }
        Command::Learn { common, out } => {
            let cfg = common.load()?;
            let p_star = reference_kernel(&cfg)?;
            let trace = run_single(
                &cfg,
                Scheme::Proposed,
                &p_star,
                run_seed(cfg.master_seed, 0, 1),
                None,
            )?;
            emit(&out, &trace_csv(&cfg, Scheme::Proposed, &trace))?;
        }
        Command::Baseline { common, scheme, out } => {
            let cfg = common.load()?;
            let p_star = reference_kernel(&cfg)?;
            let trace = run_single(&cfg, scheme, &p_star, run_seed(cfg.master_seed, 0, 1), None)?;
            emit(&out, &trace_csv(&cfg, scheme, &trace))?;
        }
        Command::Run { common, scheme, out } => {
            let cfg = common.load()?;
            let rows = run_experiment(&cfg, &schemes_or_all(scheme))?;
            emit(&out, &metrics_csv(&cfg, &rows))?;
        }
        Command::Bench { config, seed, horizon, runs, scheme, out } => {
            let mut family = Vec::new();
            for path in &config {
                let common = CommonOpts { config: path.clone(), seed, horizon, runs };
                family.push(common.load()?);
            }
            let rows = bench_cpu(&family, &schemes_or_all(scheme))?;
            emit(&out, &timing_csv(&rows))?;
        }
        Command::Report { inputs, thresholds, out } => {
            let th = match thresholds {
                Some(path) => load_thresholds(&path)?,
                None => Thresholds::default(),
            };
            emit(&out, &report(&inputs, &th)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
