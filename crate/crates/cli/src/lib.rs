//! Command-line front end: every subcommand lives here so tests can drive
//! it in-process. Each run writes a manifest that `sdda replay` can
//! re-execute and check bit for bit.

pub mod cli;
mod commands;
pub mod config;
pub mod manifest;

pub use commands::run;

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel after every step. Training allocates and drops tensors of a
/// few megabytes per layer per batch, and glibc's default thresholds turn
/// each into an mmap/munmap pair. No-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds; it is called before
    // any worker threads exist.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}
