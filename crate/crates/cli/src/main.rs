use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use btol_cli::{
    cmd_adapt, cmd_evaluate, cmd_gen_data, cmd_report, cmd_serve_oracle, cmd_train_source, load_config, write_report,
    AdaptMode, CliError, CliResult, ExitKind, Subject,
};
use btol_core::eval::format_table;
use btol_core::oracle::OracleMode;
use clap::{Parser, Subcommand};

/// Adapt a private segmentation model through a source-model oracle.
#[derive(Parser)]
#[command(name = "btol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and adaptation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source/target train/test datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing datasets.
        #[arg(long)]
        force: bool,
    },
    /// Train the source model on labeled source data.
    TrainSource {
        #[command(flatten)]
        common: Common,
    },
    /// Serve a source checkpoint until killed.
    ServeOracle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: OracleMode,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Train the target model (and adapter) against a running oracle.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        oracle: String,
        #[arg(long, value_enum)]
        mode: AdaptMode,
    },
    /// Evaluate a trained model on the target test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        subject: Subject,
    },
    /// Compare the method reports of one or more run directories.
    Report {
        runs: Vec<PathBuf>,
        /// Where to write comparison.json and comparison.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<OracleMode, String> {
    s.parse()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            cmd_gen_data(&cfg, &common.out, force)
        }
        Command::TrainSource { common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            cmd_train_source(&cfg, &common.out).map(|_| ())
        }
        Command::ServeOracle { checkpoint, mode, bind } => {
            let server = cmd_serve_oracle(&checkpoint, mode, &bind)?;
            let mut stdout = std::io::stdout();
            let _ = writeln!(stdout, "listening on {}", server.addr());
            let _ = stdout.flush();
            server.join();
            Ok(())
        }
        Command::Adapt { common, oracle, mode } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let log = cmd_adapt(&cfg, &common.out, &oracle, mode)?;
            println!(
                "{:?}: oracle forward {} backward {}",
                mode, log.calls.forward_calls, log.calls.backward_calls
            );
            Ok(())
        }
        Command::Evaluate { common, subject } => {
            let report = cmd_evaluate(&common.out, subject)?;
            print!("{}", format_table(&[(subject.name().to_string(), report)]));
            Ok(())
        }
        Command::Report { runs, out } => {
            let report = cmd_report(&runs)?;
            print!("{}\n{}", report.table, report.summary_table());
            if let Some(out) = out {
                write_report(&report, &out)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BTOL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { ExitKind::Config as u8 } else { 0 };
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { kind, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(kind as u8)
        }
    }
}
