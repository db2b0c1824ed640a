//! Conditional Bernoulli diffusion for binary forgery masks.

pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod schedule;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

/// `git describe` of the source tree this library was built from.
pub const BUILD_ID: &str = env!("MASKDIFF_BUILD_ID");

/// Keeps freed memory inside the process instead of returning large blocks to the OS.
///
/// Training allocates and drops many multi-megabyte tensors per step; with glibc's default
/// mmap threshold every one of them is paged in from scratch. Call once at startup.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        extern "C" {
            fn mallopt(param: i32, value: i32) -> i32;
        }
        const M_TRIM_THRESHOLD: i32 = -1;
        const M_MMAP_MAX: i32 = -4;
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        unsafe {
            mallopt(M_MMAP_MAX, 0);
            mallopt(M_TRIM_THRESHOLD, i32::MAX);
        }
    }
}
