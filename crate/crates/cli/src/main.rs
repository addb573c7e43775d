use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use seqest_core::asymptotics::predict;
use seqest_core::config::{load_file, ExperimentConfig};
use seqest_core::rate_fn::rate_eval;
use seqest_core::sim::{run_trials, sweep, SimSummary};
use seqest_core::RateEval;

#[derive(Parser)]
#[command(
    name = "seqest",
    version,
    about = "Sequential and multistage mean estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and list every violation.
    Validate(Common),
    /// Run one experiment at `run.epsilon`.
    Run(Common),
    /// Run one experiment per value of `run.epsilons`.
    Sweep(Common),
    /// Print the asymptotic report for the configured stage schedule.
    Predict(Common),
    /// Tabulate the rate function of the configured model.
    RateTable {
        #[command(flatten)]
        common: Common,
        /// Grid points per axis.
        #[arg(long, default_value_t = 11)]
        points: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, env = "SEQEST_WORKERS")]
    workers: Option<usize>,
    /// `section.key=value`, applied after the file is parsed.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

enum Outcome {
    Ok,
    Failed,
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = load_file(&c.config, &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.sim.seed = s;
    }
    if let Some(t) = c.trials {
        cfg.sim.trials = t;
    }
    if let Some(w) = c.workers {
        cfg.sim.workers = w;
    }
    Ok(cfg)
}

/// Loads and validates; `None` after printing violations.
fn load_valid(c: &Common) -> anyhow::Result<Option<ExperimentConfig>> {
    let cfg = load(c)?;
    let v = cfg.validate();
    if v.is_empty() {
        return Ok(Some(cfg));
    }
    eprintln!("{}: {} violation(s)", c.config.display(), v.len());
    for msg in v {
        eprintln!("  - {msg}");
    }
    Ok(None)
}

fn write_file(dir: &Path, name: &str, body: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))
}

fn report_failures(failures: &[String]) -> Outcome {
    if failures.is_empty() {
        return Outcome::Ok;
    }
    eprintln!("{} assertion(s) failed", failures.len());
    for f in failures {
        eprintln!("  - {f}");
    }
    Outcome::Failed
}

fn cmd_validate(c: &Common) -> anyhow::Result<Outcome> {
    Ok(match load_valid(c)? {
        Some(cfg) => {
            if c.verbose > 0 {
                println!("{:#?}", cfg.sim);
            }
            println!("{}: ok", c.config.display());
            Outcome::Ok
        }
        None => Outcome::Failed,
    })
}

fn cmd_run(c: &Common) -> anyhow::Result<Outcome> {
    let Some(cfg) = load_valid(c)? else {
        return Ok(Outcome::Failed);
    };
    let s = run_trials(&cfg.sim)?;
    write_file(
        &c.out,
        "summary.csv",
        &format!("{}\n{}\n", SimSummary::CSV_HEADER, s.to_csv_row()),
    )?;
    if cfg.sim.per_trial {
        write_file(&c.out, "per_trial.csv", &s.per_trial_csv())?;
    }
    println!("{}", s.describe());
    if c.verbose > 0 {
        println!("wall clock {:.3}s", s.wall_clock.as_secs_f64());
    }
    Ok(report_failures(&cfg.assertions.check(&s)))
}

fn cmd_sweep(c: &Common) -> anyhow::Result<Outcome> {
    let Some(cfg) = load_valid(c)? else {
        return Ok(Outcome::Failed);
    };
    if cfg.sim.epsilons.is_empty() {
        bail!("sweep needs run.epsilons");
    }
    let sw = sweep(&cfg.sim)?;
    write_file(&c.out, "sweep.csv", &sw.to_csv())?;
    if cfg.sim.per_trial {
        for (i, row) in sw.rows.iter().enumerate() {
            write_file(&c.out, &format!("per_trial_{i}.csv"), &row.per_trial_csv())?;
        }
    }
    for row in &sw.rows {
        println!("{}", row.describe());
    }
    if let Some(t) = &sw.trend {
        println!(
            "trend: ratio deviation non-increasing {}, coverage deviation non-increasing {}",
            t.ratio_ok(),
            t.coverage_ok()
        );
    }
    Ok(report_failures(&cfg.assertions.check_sweep(&sw)))
}

fn cmd_predict(c: &Common) -> anyhow::Result<Outcome> {
    let Some(cfg) = load_valid(c)? else {
        return Ok(Outcome::Failed);
    };
    let sim = &cfg.sim;
    let nu = sim.model.variance(sim.mu)?;
    let eps = sim.epsilons.first().copied().unwrap_or(sim.epsilon);
    let rep = predict(
        eps,
        sim.delta,
        sim.mu,
        nu,
        &sim.shape,
        &sim.stage_schedule(),
        sim.ell_cap,
    )?;
    print!("epsilon = {eps}\n{}", rep.to_kv());
    Ok(Outcome::Ok)
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![0.5 * (lo + hi)];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn cmd_rate_table(c: &Common, points: usize) -> anyhow::Result<Outcome> {
    let Some(cfg) = load_valid(c)? else {
        return Ok(Outcome::Failed);
    };
    let m = &cfg.sim.model;
    let mu = cfg.sim.mu;
    let sd = m.variance(mu)?.sqrt();
    let dom = m.domain();
    let pad = 1e-3 * (1.0 + mu.abs());
    let lo = (mu - 3.0 * sd).max(if dom.lo.is_finite() {
        dom.lo + pad
    } else {
        f64::NEG_INFINITY
    });
    let hi = (mu + 3.0 * sd).min(if dom.hi.is_finite() {
        dom.hi - pad
    } else {
        f64::INFINITY
    });
    let g = grid(lo, hi, points);
    let mut body = String::from("theta,z,rate,minimizer,method\n");
    for &theta in &g {
        for &z in &g {
            let RateEval {
                value,
                minimizer,
                method,
            } = rate_eval(m, z, theta)?;
            let _ = writeln!(
                body,
                "{theta},{z},{value},{},{method:?}",
                minimizer.map(|t| t.to_string()).unwrap_or_default()
            );
        }
    }
    write_file(&c.out, "rate_table.csv", &body)?;
    if c.verbose > 0 {
        print!("{body}");
    }
    println!(
        "{} rows for {} written to {}",
        g.len() * g.len(),
        m.name(),
        c.out.join("rate_table.csv").display()
    );
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Validate(c) => cmd_validate(c),
        Command::Run(c) => cmd_run(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Predict(c) => cmd_predict(c),
        Command::RateTable { common, points } => cmd_rate_table(common, *points),
    };
    match res {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
