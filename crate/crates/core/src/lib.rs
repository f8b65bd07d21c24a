//! Chunk-parallel, DFA-driven parsing of delimiter-separated data into
//! typed columns.

pub mod chunk;
pub mod columnar;
pub mod container;
pub mod dfa;
pub mod encoding;
pub mod error;
pub mod gen;
pub mod offsets;
pub mod oracle;
pub mod packed;
pub mod parser;
pub mod scan;
pub mod streaming;
pub mod typeconv;

pub use error::{Error, Result};

/// Stops glibc from raising its mmap threshold after large frees, so
/// partition-sized buffers go back to the OS instead of piling up in
/// per-thread arenas. Call once at startup; a no-op on other platforms.
pub fn limit_allocator_retention() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 128 * 1024);
    }
}
