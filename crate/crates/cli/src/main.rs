//! `enrl`: run the enteral nutrition RL pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enteral_rl::pipeline::{self, RunConfig};
use enteral_rl::policy::PolicyKind;
use enteral_rl::training::CqlForm;
use enteral_rl::Error;

#[derive(Parser)]
#[command(name = "enrl", version, about = "Offline RL for enteral nutrition dosing")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated policies to evaluate (deepen, guideline, bc, clinician, random).
    #[arg(long, global = true, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Conservative penalty form: mean or log_sum_exp.
    #[arg(long, global = true)]
    cql_form: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth,
    /// Turn the cohort into episodes with states, actions and rewards.
    Featurize,
    /// Train the behavior-cloning model.
    TrainBc,
    /// Train the conservative dueling double Q-network.
    Train {
        /// Search the alpha/gamma grid on the validation split first.
        #[arg(long)]
        grid: bool,
    },
    /// Off-policy evaluation of the configured policies on the test split.
    Eval,
    /// Render the evaluation into flat tables.
    Report {
        /// Accept artifacts produced under different configurations.
        #[arg(long)]
        force: bool,
    },
    /// Run every stage in order.
    All {
        #[arg(long)]
        grid: bool,
    },
}

fn config(common: &Common) -> enteral_rl::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) if !path.exists() => return Err(Error::MissingInput(path.clone())),
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(list) = &common.policies {
        cfg.policies.evaluate = list.iter().map(|s| PolicyKind::parse(s.trim())).collect::<Result<_, _>>()?;
    }
    if let Some(form) = &common.cql_form {
        cfg.train.cql_form = CqlForm::parse(form)?;
    }
    cfg.resolved().validate().map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })?;
    Ok(cfg)
}

fn print<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: &Cli) -> enteral_rl::Result<()> {
    let cfg = config(&cli.common)?;
    log::info!("config hash {}", cfg.hash());
    match &cli.command {
        Command::Synth => print(&pipeline::run_synth(&cfg)?),
        Command::Featurize => print(&pipeline::run_featurize(&cfg)?),
        Command::TrainBc => {
            let r = pipeline::run_train_bc(&cfg)?;
            print(&serde_json::json!({ "test_accuracy": r.test_accuracy, "steps": r.train_loss.len() }));
        }
        Command::Train { grid } => print(&pipeline::run_train(&cfg, *grid)?),
        Command::Eval => {
            let r = pipeline::run_eval(&cfg)?;
            for p in &r.policies {
                println!("{:<10} cwpdis {:>8.3}  mortality {:.3}", p.policy.name(), p.cwpdis, p.mortality.mortality);
            }
        }
        Command::Report { force } => {
            for path in pipeline::run_report(&cfg, *force)? {
                println!("{}", path.display());
            }
        }
        Command::All { grid } => {
            pipeline::run_all(&cfg, *grid)?;
            println!("{}", cfg.out_dir.join(pipeline::REPORT_DIR).display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
