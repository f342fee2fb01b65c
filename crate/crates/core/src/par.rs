//! Execution policy for the data-parallel kernels.
//!
//! Every hot loop in the crate goes through the helpers here. With the
//! `parallel` feature (default) they dispatch to rayon when the runtime mode
//! is [`ExecMode::Parallel`]; otherwise they run on the calling thread. Work
//! is always partitioned so that each output element is written by exactly
//! one task in a fixed order, which keeps results bit-identical across modes
//! and thread counts.

use std::sync::atomic::{AtomicU8, Ordering};

/// How kernels schedule their outer loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_exec_mode(mode: ExecMode) {
    MODE.store(
        match mode {
            ExecMode::Sequential => 0,
            ExecMode::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn exec_mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Runs `f` with the given mode and restores the previous one afterwards.
pub fn with_exec_mode<R>(mode: ExecMode, f: impl FnOnce() -> R) -> R {
    let prev = exec_mode();
    set_exec_mode(mode);
    let out = f();
    set_exec_mode(prev);
    out
}

/// Caps the global worker pool. Only the first call has an effect; later
/// calls (or calls after rayon has already started) are ignored.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = threads.filter(|&n| n > 0) {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Reads `CYLPOSE_THREADS` and applies it.
pub fn init_threads_from_env() {
    let n = std::env::var("CYLPOSE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok());
    init_threads(n);
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec_mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec_mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
