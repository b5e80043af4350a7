use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pemsim::harness::{
    compute_metrics, group_baseline, read_traces, run_scenario, write_metrics, write_outputs,
    Scenario, TimeMode,
};

#[derive(Parser)]
#[command(
    name = "pemsim",
    version,
    about = "Packetized energy management co-simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Virtual,
    RealTime,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file against the schema.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run a scenario and write CSV traces.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        time_mode: Option<Mode>,
        #[arg(long)]
        speedup: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Baseline demand and acceptance for the scenario's first fleet group.
    Baseline {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Fleet SoC limits for the scenario's first fleet group.
    Limits {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Recompute metrics from traces stored in a run directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 600.0)]
        warmup: f64,
        #[arg(long)]
        baseline_kw: Option<f64>,
        #[arg(long, default_value_t = 4.5)]
        rated_kw: f64,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    let sc = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    sc.validate()?;
    Ok(sc)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Validate { scenario } => {
            let sc = load(&scenario)?;
            println!(
                "{}: ok ({} devices, {} s)",
                sc.name,
                sc.device_count(),
                sc.duration_s
            );
        }
        Command::Run {
            scenario,
            seed,
            time_mode,
            speedup,
            out,
        } => {
            let mut sc = load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(m) = time_mode {
                sc.time_mode = match m {
                    Mode::Virtual => TimeMode::Virtual,
                    Mode::RealTime => TimeMode::RealTime,
                };
            }
            if let Some(s) = speedup {
                sc.speedup = s;
            }
            sc.validate()?;
            let r = run_scenario(&sc)?;
            write_outputs(&out, &r.traces, &r.metrics)?;
            for (k, v) in r.metrics.entries() {
                if !v.is_empty() {
                    println!("{k:<28} {v}");
                }
            }
            println!("{:<28} {:.2}", "wall_s", r.wall_s);
            println!("wrote {}", out.display());
        }
        Command::Baseline { scenario } => {
            let sc = load(&scenario)?;
            let (b, _) = group_baseline(&sc)?;
            println!("beta_c     {:.4}", b.beta_c);
            println!("beta_d     {:.4}", b.beta_d);
            println!("p_nom_kw   {:.2}", b.p_nom_kw);
            println!("mean_soc   {:.3}", b.mean_soc);
        }
        Command::Limits { scenario } => {
            let sc = load(&scenario)?;
            let (_, l) = group_baseline(&sc)?;
            println!("upper      {:.3}", l.upper);
            println!("lower      {:.3}", l.lower);
            println!("z_upper    {:.4}", l.z_upper);
            println!("z_lower    {:.4}", l.z_lower);
        }
        Command::Report {
            out,
            warmup,
            baseline_kw,
            rated_kw,
        } => {
            let traces = read_traces(&out).with_context(|| format!("reading {}", out.display()))?;
            let m = compute_metrics(&traces, warmup, baseline_kw, rated_kw)?;
            write_metrics(&out.join("metrics.csv"), &m)?;
            for (k, v) in m.entries() {
                if !v.is_empty() {
                    println!("{k:<28} {v}");
                }
            }
        }
    }
    Ok(())
}
