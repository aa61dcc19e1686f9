//! `calsched` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O or report failure, 2 usage or config error,
//! 3 engine defect while running a game.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calsched::engine::Clock;
use calsched::scenario::CostMode;
use calsched::suite::{self, SuiteConfig, SuiteError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "calsched",
    version,
    about = "Generate, run and score calendar scheduling suites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the canonical suite config as TOML.
    Config,
    /// Write one scenario file per grid point.
    Generate(Common),
    /// Run the configured protocols over generated scenarios.
    Run {
        #[command(flatten)]
        common: Common,
        /// Protocols to run, overriding the config (imap, sd_map, dsm_welfare, dsm_private).
        #[arg(long = "protocol", value_delimiter = ',')]
        protocols: Vec<String>,
        /// Stamp every event with this timestamp instead of the wall clock.
        #[arg(long)]
        fixed_clock: Option<String>,
    },
    /// Compute metrics, VPS tables and frontier points from traces.
    Report(Common),
    /// Run the DSM sweep over theta and l_max and write its frontier.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        theta: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        l_max: Vec<usize>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Suite config (TOML). Defaults to the canonical 90-task suite.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, short, env = "CALSCHED_OUT", default_value = "calsched-out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Keep only the first N grid tasks.
    #[arg(long)]
    max_tasks: Option<usize>,
    #[arg(long)]
    seeds_per_cell: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_cost_mode)]
    cost_modes: Vec<CostMode>,
}

fn parse_cost_mode(s: &str) -> Result<CostMode, String> {
    match s {
        "uniform" => Ok(CostMode::Uniform),
        "varied" => Ok(CostMode::Varied),
        other => Err(format!("unknown cost mode {other:?}")),
    }
}

impl Common {
    fn load(&self) -> Result<SuiteConfig, SuiteError> {
        let mut config = match &self.config {
            Some(path) => SuiteConfig::load(path)?,
            None => SuiteConfig::canonical(),
        };
        if let Some(w) = self.workers {
            config.workers = w;
        }
        if let Some(m) = self.max_tasks {
            config.grid.max_tasks = Some(m);
        }
        if let Some(n) = self.seeds_per_cell {
            config.grid.seeds_per_cell = n;
        }
        if let Some(s) = self.seed {
            config.scenario.seed = s;
        }
        if !self.cost_modes.is_empty() {
            config.grid.cost_modes = self.cost_modes.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn exit_code(err: &SuiteError) -> u8 {
    match err {
        SuiteError::Config(_) | SuiteError::Toml { .. } | SuiteError::Protocol(_) => 2,
        SuiteError::Engine { .. } => 3,
        _ => 1,
    }
}

fn generate(common: &Common) -> Result<(), SuiteError> {
    let config = common.load()?;
    let summary = suite::generate(&config, &common.out)?;
    let [hard, medium, easy] = summary.bucket_counts;
    println!(
        "wrote {} scenarios to {}",
        summary.files.len(),
        suite::scenario_dir(&common.out).display()
    );
    println!(
        "difficulty tertiles: hard < {:.4} <= medium < {:.4} <= easy",
        summary.buckets.hard_below, summary.buckets.easy_from
    );
    println!("buckets: hard {hard}, medium {medium}, easy {easy}");
    Ok(())
}

fn run(common: &Common, protocols: &[String], fixed_clock: Option<&str>) -> Result<(), SuiteError> {
    let mut config = common.load()?;
    if !protocols.is_empty() {
        config.protocols = protocols.to_vec();
        config.lineup = None;
        config.validate()?;
    }
    let clock = fixed_clock.map_or(Clock::System, |t| Clock::Fixed(t.to_string()));
    let summary = suite::run(&config, &common.out, &clock)?;
    for (protocol, n) in summary.counts {
        println!("{protocol}: {n} traces");
    }
    Ok(())
}

fn report(common: &Common) -> Result<(), SuiteError> {
    let config = common.load()?;
    let (metrics, tables) = suite::report(&config, &common.out)?;
    println!(
        "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
        "protocol", "mode", "success", "excess", "adj", "fair", "msgs", "vps", "excess_v"
    );
    for a in &metrics.aggregates {
        println!(
            "{:<14} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.2} {:>9.3} {:>8.3}",
            a.protocol,
            a.cost_mode,
            a.success,
            a.excess,
            a.excess_adj,
            a.fairness,
            a.messages_per_meeting,
            a.vps_mean,
            a.excess_vps_mean
        );
    }
    println!(
        "{} seats, {} games; CSVs in {}",
        metrics.seats.len(),
        tables.games.len(),
        suite::report_dir(&common.out).display()
    );
    Ok(())
}

fn sweep(common: &Common, theta: &[f64], l_max: &[usize]) -> Result<(), SuiteError> {
    let mut config = common.load()?;
    if !theta.is_empty() {
        config.sweep.theta = theta.to_vec();
    }
    if !l_max.is_empty() {
        config.sweep.l_max = l_max.to_vec();
    }
    config.validate()?;
    let points = suite::sweep(&config, &common.out, &Clock::System)?;
    for p in &points {
        println!(
            "{:<24} -excess_vps {:>8.3}  -excess_adj {:>8.3}  success {:.3}",
            p.protocol, p.neg_excess_vps, p.neg_excess_adj, p.success
        );
    }
    println!(
        "frontier written to {}",
        Path::new(&common.out).join("sweep").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Config => {
            print!("{}", SuiteConfig::canonical().to_toml());
            Ok(())
        }
        Command::Generate(c) => generate(c),
        Command::Run {
            common,
            protocols,
            fixed_clock,
        } => run(common, protocols, fixed_clock.as_deref()),
        Command::Report(c) => report(c),
        Command::Sweep {
            common,
            theta,
            l_max,
        } => sweep(common, theta, l_max),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
