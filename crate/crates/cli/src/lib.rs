//! Batch interface: CSV ingestion, training, prediction, simulation,
//! evaluation and tuning, with JSON model files.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod model;

pub use error::CliError;

/// Sizes the global thread pool from `GPBOOST_NUM_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GPBOOST_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("GPBOOST_NUM_THREADS must be a positive integer, got '{v}'")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}
