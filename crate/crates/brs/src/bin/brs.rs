//! Command-line entry point: simulation studies, the empirical study,
//! the runtime validation suite, and sampler draw dumps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use brs::harness::empirical::{run_empirical, write_empirical_table};
use brs::harness::validate::run_validation;
use brs::harness::{dump_draws, run_study, DumpTarget, Method, StudyConfig};
use brs::Result;

#[derive(Parser)]
#[command(name = "brs", version, about = "Doubly robust ATE estimation via Bayesian regression synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study from a TOML config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the config's replication count.
        #[arg(long)]
        replications: Option<usize>,
        /// Override the config's worker count.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Override the config's base seed.
        #[arg(long)]
        base_seed: Option<u64>,
    },
    /// Run the birth-weight empirical study.
    Empirical {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's data file path.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restrict to a comma-separated method list.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Run the built-in invariant and oracle checks.
    Validate,
    /// Dump one synthesis chain's retained draws to a columnar file.
    DumpDraws {
        #[arg(long)]
        config: PathBuf,
        /// Which chain to dump: mu1, mu0, or pi.
        #[arg(long, default_value = "pi")]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn simulate(
    config: PathBuf,
    output_dir: Option<PathBuf>,
    replications: Option<usize>,
    parallelism: Option<usize>,
    base_seed: Option<u64>,
) -> Result<bool> {
    let mut cfg = StudyConfig::load(&config)?;
    // Flags take precedence over file values.
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    if let Some(r) = replications {
        cfg.replications = r;
    }
    if let Some(p) = parallelism {
        cfg.parallelism = p;
    }
    if let Some(s) = base_seed {
        cfg.base_seed = s;
    }
    cfg.validate()?;
    let summary = run_study(&cfg)?;
    println!(
        "study {}: {}/{} replications succeeded",
        cfg.study.label(),
        summary.successful_replications,
        summary.total_replications
    );
    for row in &summary.metrics {
        println!(
            "  n={} {} {}: bias {:.4}, rmse {:.4}, cp {:.1}%, al {:.4} (R_eff {})",
            row.n, row.scenario, row.method, row.bias, row.rmse, row.cp_percent, row.al,
            row.r_effective
        );
    }
    println!("records: {}", summary.records_path.display());
    println!("metrics: {}", summary.metrics_path.display());
    println!("manifest: {}", summary.manifest_path.display());
    Ok(summary.success_fraction() >= 0.9)
}

fn empirical(config: PathBuf, data: Option<PathBuf>, methods: Option<String>) -> Result<bool> {
    let mut cfg = StudyConfig::load(&config)?;
    if let Some(path) = data {
        cfg.data_path = Some(path);
    }
    if let Some(list) = methods {
        cfg.methods = list
            .split(',')
            .map(|s| Method::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?;
    }
    let table = run_empirical(&cfg)?;
    println!("n = {}, naive group-mean difference = {:.2}", table.n, table.naive_difference);
    println!("{:<6} {:>10} {:>8} {:>22} {:>8}", "method", "est", "se", "95% CI", "length");
    for row in &table.rows {
        println!(
            "{:<6} {:>10.2} {:>8.2} [{:>9.2}, {:>9.2}] {:>8.2}",
            row.method.label(),
            row.estimate,
            row.se,
            row.ci_lo,
            row.ci_hi,
            row.ci_length()
        );
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let out = cfg.output_dir.join("empirical.csv");
    write_empirical_table(&table, &out)?;
    println!("estimates: {}", out.display());
    Ok(true)
}

fn validate() -> bool {
    let checks = run_validation();
    let mut all = true;
    for c in &checks {
        println!("{}: {} ({})", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
        all &= c.passed;
    }
    all
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, output_dir, replications, parallelism, base_seed } => {
            simulate(config, output_dir, replications, parallelism, base_seed)
        }
        Command::Empirical { config, data, methods } => empirical(config, data, methods),
        Command::Validate => Ok(validate()),
        Command::DumpDraws { config, target, out } => {
            StudyConfig::load(&config)
                .and_then(|cfg| dump_draws(&cfg, DumpTarget::parse(&target)?, &out))
                .map(|()| true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
