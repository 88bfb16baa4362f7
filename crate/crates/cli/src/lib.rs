//! Library side of the `cmfusion` command-line tool.
//!
//! Commands are plain functions returning serialisable results so the
//! acceptance tests can drive them in-process; `main.rs` only parses flags,
//! prints and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod variants;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, AblateArgs, AblationOutput, EvalArgs, EvalOutput,
    GradcheckArgs, GradcheckOutput, SynthArgs, SynthOutput, TrainArgs, TrainOutput,
};
pub use config::{RunConfig, SynthConfig};
pub use error::{CliError, CliResult, ExitCode};
pub use variants::Variant;

/// Environment variable capping the worker threads used by a command.
pub const THREADS_ENV: &str = "CMF_THREADS";

/// Parses [`THREADS_ENV`]; `None` when unset.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Runs `f` on a pool limited to [`THREADS_ENV`] threads when it is set.
pub fn with_thread_cap<R, F>(f: F) -> CliResult<R>
where
    R: Send,
    F: FnOnce() -> CliResult<R> + Send,
{
    let cap = thread_cap()?;
    #[cfg(feature = "parallel")]
    if let Some(n) = cap {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config(format!("cannot build thread pool: {e}")))?;
        return pool.install(f);
    }
    let _ = cap;
    f()
}
