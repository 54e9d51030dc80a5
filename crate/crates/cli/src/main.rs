use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semwave_cli::commands::{
    cmd_ber, cmd_eval, cmd_gradcheck, cmd_info, cmd_multicast, cmd_train, prepare, CliError, RunOptions,
};
use semwave_cli::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "semwave", version, about = "Semantic waveform bank link experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). `info` runs without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Trials per grid cell (config default 20).
    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Worker threads for grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train a waveform bank; writes checkpoints and loss.csv.
    Train {
        /// Continue from checkpoints/latest.swck when present.
        #[arg(long)]
        resume: bool,
    },
    /// Metrics per system, channel and SNR.
    Eval,
    /// One transmission replayed through every receiver of a group.
    Multicast,
    /// Pre- and post-FEC bit error rates of the digital systems.
    Ber,
    /// Analytic vs finite-difference gradients per channel.
    Gradcheck,
    /// Profile constants and the throughput table.
    Info,
}

fn run(args: &Args) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if args.command == Command::Info => ExperimentConfig::parse("", std::path::Path::new("."))?,
        None => {
            return Err(CliError::Config(vec![semwave_cli::config::Issue {
                field: "--config".into(),
                reason: "required for this command".into(),
            }]))
        }
    };
    let mut opts = RunOptions::new(&args.out);
    opts.seed = args.seed;
    opts.trials = args.trials;
    opts.jobs = args.jobs.max(1);
    let cfg = prepare(cfg, &opts)?;
    match args.command {
        Command::Train { resume } => {
            opts.resume = resume;
            let dir = cmd_train(&cfg, &opts)?;
            println!("wrote {}", dir.display());
        }
        Command::Eval => println!("wrote {}", cmd_eval(&cfg, &opts)?.display()),
        Command::Multicast => println!("wrote {}", cmd_multicast(&cfg, &opts)?.display()),
        Command::Ber => println!("wrote {}", cmd_ber(&cfg, &opts)?.display()),
        Command::Gradcheck => {
            let (dir, rows) = cmd_gradcheck(&cfg, &opts)?;
            for r in &rows {
                println!(
                    "{:<12} {} max_error={:.3e} ({} coordinates)",
                    r.channel,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_error,
                    r.coordinates
                );
            }
            println!("wrote {}", dir.display());
            if let Some(r) = rows.iter().find(|r| !r.passed) {
                return Err(CliError::Numeric(format!("gradient check failed on channel '{}'", r.channel)));
            }
        }
        Command::Info => print!("{}", cmd_info(&cfg, &opts)?.1),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semwave: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
