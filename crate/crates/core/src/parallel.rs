//! Thread-count control shared by training and the parallel scan.
//!
//! `SSMOCR_THREADS` caps the worker count. Benchmarks pin it to 1 via
//! [`pin_single_thread`]. Every parallel path reduces in a fixed order, so
//! results never depend on the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rayon::ThreadPool;

pub const THREADS_ENV: &str = "SSMOCR_THREADS";

static OVERRIDE: AtomicUsize = AtomicUsize::new(0);
static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// Thread cap requested through the environment, if any.
pub fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        0 => env_threads().unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get().min(4))
                .unwrap_or(1)
        }),
        n => n,
    }
}

pub fn set_threads(n: usize) {
    OVERRIDE.store(n.max(1), Ordering::Relaxed);
}

pub fn pin_single_thread() {
    set_threads(1);
}

/// Drops any programmatic override, returning control to the environment.
pub fn clear_override() {
    OVERRIDE.store(0, Ordering::Relaxed);
}

/// Runs `f` inside the shared pool when more than one thread is allowed.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    if threads() <= 1 {
        return f();
    }
    let pool = POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .build()
            .expect("failed to build thread pool")
    });
    pool.install(f)
}
