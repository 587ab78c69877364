use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use spotfl::report::render_table;
use spotfl::{
    compare, config_digest, load_scenario, read_summary, run_modes, write_outputs, write_summary,
};
use spotfl_core::PolicyMode;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "spotfl",
    version,
    about = "Simulate synchronous federated learning on spot instances"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write timeline CSVs and summaries.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the policy in the config. Ignored with --all.
        #[arg(long, value_parser = parse_policy)]
        policy: Option<PolicyMode>,
        /// Run all three policies and also write a combined summary.json.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `outputs` from the config, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare summaries of the same scenario.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Also write the merged summary as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check a scenario file and print its digest.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_policy(s: &str) -> Result<PolicyMode, String> {
    PolicyMode::parse(s)
        .ok_or_else(|| format!("unknown policy `{s}` (fedcostaware|plainspot|ondemand)"))
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn load(path: &Path) -> Result<spotfl_core::ScenarioConfig, Failure> {
    load_scenario(path).map_err(|e| fail(if e.is_io() { EXIT_IO } else { EXIT_CONFIG }, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            policy,
            all,
            seed,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let modes: Vec<PolicyMode> = if all {
                PolicyMode::ALL.to_vec()
            } else {
                vec![policy.unwrap_or(cfg.policy.mode)]
            };
            let outcomes = run_modes(&cfg, &modes).map_err(|e| {
                let code = if e.is_config() {
                    EXIT_CONFIG
                } else {
                    EXIT_RUNTIME
                };
                fail(code, e)
            })?;
            let dir = out
                .or_else(|| {
                    cfg.outputs
                        .as_ref()
                        .map(|o| config.parent().unwrap_or(Path::new(".")).join(o))
                })
                .unwrap_or_else(|| PathBuf::from("out"));
            let written = write_outputs(&cfg, &outcomes, &dir).map_err(|e| fail(EXIT_IO, e))?;
            for o in &outcomes {
                info!("{}: total cost {:.6}", o.mode, o.total_cost());
            }
            for p in written.timelines.iter().chain(&written.summaries) {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Compare { summaries, json } => {
            let loaded = summaries
                .iter()
                .map(|p| {
                    read_summary(p)
                        .map_err(|e| fail(if e.is_io() { EXIT_IO } else { EXIT_CONFIG }, e))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let merged = compare(&loaded).map_err(|e| fail(EXIT_CONFIG, e))?;
            print!("{}", render_table(&merged));
            if let Some(path) = json {
                let file = std::fs::File::create(&path).map_err(|e| fail(EXIT_IO, e))?;
                write_summary(&merged, std::io::BufWriter::new(file))
                    .map_err(|e| fail(EXIT_IO, e))?;
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: {} ({} clients, {} rounds, policy {}) digest {}",
                cfg.name,
                cfg.clients.len(),
                cfg.rounds,
                cfg.policy.mode,
                config_digest(&cfg)
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
