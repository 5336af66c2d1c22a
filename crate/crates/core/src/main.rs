use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use limitlab::config::ExperimentConfig;
use limitlab::experiment::{run, Lab, Profile};

#[derive(Parser)]
#[command(name = "limitlab", version, about = "Limit-theorem checks for random piecewise-linear expanding maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment (or `all`) and write report.json plus CSV series.
    Run {
        command: Command,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the seed stored in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "RDS_LIMITLAB_THREADS")]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value_t = ProfileArg::Default)]
        tolerance_profile: ProfileArg,
    },
    /// Print a one-screen summary of a config.
    Describe {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Command {
    MixCoeffs,
    Decay,
    Variance,
    Cumulants,
    Clt,
    Concentration,
    Moddev,
    Fclt,
    Martingale,
    Multicorr,
    Rosenthal,
    Nonconv,
    ChfDecor,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Strict,
    Default,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Describe { config } => {
            let lab = match ExperimentConfig::load(&config).and_then(|c| Lab::new(c, Profile::DEFAULT)) {
                Ok(l) => l,
                Err(e) => return fail(e),
            };
            match lab.describe() {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Run { command, config, out, seed, threads, tolerance_profile } => {
            if let Some(t) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                    return fail(e);
                }
            }
            let profile = match tolerance_profile {
                ProfileArg::Strict => Profile::STRICT,
                ProfileArg::Default => Profile::DEFAULT,
            };
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let seed = seed.unwrap_or(cfg.seed);
            let lab = match Lab::new(cfg, profile) {
                Ok(l) => l,
                Err(e) => return fail(e),
            };
            let name = command.to_possible_value().expect("no skipped variants").get_name().to_string();
            let report = match run(&lab, &name, seed, &out) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            for section in &report.sections {
                if let Some(msg) = &section.message {
                    println!("{:<14} {:<7} {msg}", section.command, section.status.to_uppercase());
                }
                for v in &section.verdicts {
                    println!(
                        "{:<14} {:<4} {:<36} {:.4e} {} {:.4e} (+{:.2e})",
                        section.command,
                        if v.pass { "PASS" } else { "FAIL" },
                        v.test,
                        v.statistic,
                        v.relation,
                        v.bound,
                        v.slack
                    );
                }
            }
            println!("report: {}", out.join("report.json").display());
            ExitCode::from(report.exit_code() as u8)
        }
    }
}
