//! Command-line front end and local refinement service for `lightsq`.

pub mod args;
pub mod commands;
pub mod error;
pub mod input;
pub mod options;
pub mod server;
pub mod session;

pub use error::CliError;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "LIGHTSQ_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`]. Returns the thread count in
/// effect, or `None` when the variable is unset.
pub fn init_threads() -> Result<Option<usize>, CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    Ok(Some(n))
}
