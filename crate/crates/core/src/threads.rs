//! Worker-pool sizing from the `BICD_THREADS` environment variable.

use crate::error::{BicdError, Result};

pub const THREADS_ENV: &str = "BICD_THREADS";

/// Parse a thread-count override. `None` or an empty value means "use the
/// default"; zero or a non-integer is an error.
pub fn parse_threads(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(BicdError::Config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
    }
}

/// Build a pool capped by `BICD_THREADS` when it is set.
pub fn pool_from_env() -> Result<rayon::ThreadPool> {
    let cap = parse_threads(std::env::var(THREADS_ENV).ok().as_deref())?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cap {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| BicdError::Config(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_cases() {
        assert_eq!(parse_threads(None).unwrap(), None);
        assert_eq!(parse_threads(Some(" 3 ")).unwrap(), Some(3));
        assert!(parse_threads(Some("0")).is_err());
        assert!(parse_threads(Some("x")).is_err());
    }
}
