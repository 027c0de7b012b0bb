//! Command-line harness: dataset ingestion, encoding, inference, benchmark
//! and ablation runs, and the storage / amortized-cost ledgers.

pub mod cli;
pub mod commands;
pub mod report;

pub use cli::Cli;
pub use commands::run;

/// Problems with flags or environment that no core type reports.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
}

/// 2 for validation errors (bad flags, malformed input, mismatched
/// artifacts), 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dbsa_core::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
        if cause.downcast_ref::<CliError>().is_some() {
            return 2;
        }
    }
    1
}

/// Worker count: available parallelism, capped by `DBSA_THREADS`.
pub fn worker_count() -> Result<usize, CliError> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DBSA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available)),
            _ => Err(CliError::Usage(format!("DBSA_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(available),
    }
}
