//! File formats, training orchestration and the command-line front end,
//! built on the `no_std` numeric core.

pub use mtag_core;

pub mod audio;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod evaluate;
pub mod fixtures;
pub mod manifest;
pub mod registry;
pub mod report;
pub mod run;
pub mod synth;
pub mod train;

/// Keeps freed activation buffers in the heap. glibc otherwise returns
/// large blocks to the kernel after every step and page-faults them back in
/// on the next, which costs about a fifth of training time. No-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
