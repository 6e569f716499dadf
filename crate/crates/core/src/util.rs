//! Small shared helpers.

use sha2::{Digest, Sha256};

use crate::error::{Error, EvalError};

/// SHA-256 digest of `bytes` as a lowercase hex string.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 digest of `bytes` as a raw 32-byte array (used for RNG seeding).
pub(crate) fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Runs `f` on a dedicated pool of `jobs` rayon workers, or inline on the
/// global pool when no cap is given.
pub(crate) fn run_in_pool<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, Error> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EvalError::Validation(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
