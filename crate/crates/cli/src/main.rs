use std::io::Write;
use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand, ValueEnum};
use cmfusion::autograd::fault::Fault;
use cmfusion_cli::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, with_thread_cap, AblateArgs, CliError, CliResult,
    EvalArgs, ExitCode, GradcheckArgs, SynthArgs, TrainArgs, Variant,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cmfusion", version, about = "Cross-modal audio/text fusion: synthesis, training, evaluation, ablations and gradient checks")]
struct Cli {
    /// Output format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test datasets.
    Synth {
        /// Synthesis spec (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write its checkpoint and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the variant named in the config.
        #[arg(long)]
        variant: Option<Variant>,
        /// Log every epoch to stderr.
        #[arg(long)]
        progress: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several variants over a seed range and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant ids; all registered variants by default.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// First seed of the range.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        progress: bool,
    },
    /// Finite-difference check of the analytic gradients on a tiny network.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn emit<T: Serialize>(format: Format, value: &T, table: impl FnOnce(&T) -> String) -> CliResult<()> {
    let text = match format {
        Format::Json => serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))? + "\n",
        Format::Table => table(value),
    };
    // A closed pipe (`| head`) is not an error worth reporting.
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let format = cli.format;
    match cli.command {
        Command::Synth { config, out, seed } => {
            let o = cmd_synth(&SynthArgs { config, out, seed })?;
            emit(format, &o, |o| o.table())
        }
        Command::Train { config, out, seed, variant, progress } => {
            let o = cmd_train(&TrainArgs { config, out, seed, variant, progress })?;
            emit(format, &o, |o| o.table())
        }
        Command::Eval { checkpoint, data, out } => {
            let o = cmd_eval(&EvalArgs { checkpoint, data, out })?;
            emit(format, &o, |o| o.table())
        }
        Command::Ablate { config, variants, out, seed, seeds, progress } => {
            let variants = variants.as_deref().map(Variant::parse_list).transpose()?;
            let o = cmd_ablate(&AblateArgs {
                config,
                variants,
                out,
                seed,
                n_seeds: seeds,
                progress,
            })?;
            emit(format, &o, |o| o.table())
        }
        Command::Gradcheck { config, seed, out, inject_fault } => {
            let inject_fault = inject_fault
                .map(|f| f.parse::<Fault>().map_err(CliError::config))
                .transpose()?;
            let o = cmd_gradcheck(&GradcheckArgs { config, seed, out, inject_fault })?;
            emit(format, &o, |o| o.table())?;
            if o.passed {
                Ok(())
            } else {
                Err(CliError::check(format!(
                    "gradient check failed: relative error {:.3e} at {}[{}]",
                    o.max_rel_error,
                    o.worst_param.as_deref().unwrap_or("?"),
                    o.worst_index.unwrap_or(0)
                )))
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match with_thread_cap(|| run(cli)) {
        Ok(()) => ExitCode::Ok,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit
        }
    };
    process::exit(code.code());
}
