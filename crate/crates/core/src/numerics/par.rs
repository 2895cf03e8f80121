//! Row-parallel execution helper.
//!
//! Every kernel in this crate that parallelizes does so by handing disjoint
//! output rows to worker threads; each row is computed by exactly the same
//! sequential code regardless of the thread count, so results are
//! bit-identical to the single-threaded reference mode.
//!
//! The worker count comes from the `IEA_THREADS` environment variable
//! (`0` or `1` selects sequential mode); when unset it defaults to the
//! available hardware parallelism.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

const UNSET: usize = usize::MAX;
static OVERRIDE: AtomicUsize = AtomicUsize::new(UNSET);

/// Rows × row length below which spawning threads is not worth it.
const MIN_PARALLEL_WORK: usize = 1 << 15;

fn env_threads() -> usize {
    static ENV: OnceLock<usize> = OnceLock::new();
    *ENV.get_or_init(|| match std::env::var("IEA_THREADS") {
        Ok(v) => v.trim().parse().unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

/// Number of worker threads kernels may use. `1` means sequential.
pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        UNSET => env_threads().max(1),
        n => n.max(1),
    }
}

/// Overrides `IEA_THREADS` for the rest of the process.
pub fn set_threads(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

/// Calls `f(row_index, row_slice)` for every `row_len`-wide row of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if row_len == 0 {
        return;
    }
    let rows = out.len() / row_len;
    let workers = threads().min(rows);
    if workers <= 1 || out.len() < MIN_PARALLEL_WORK {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
        return;
    }
    let rows_per = rows.div_ceil(workers);
    std::thread::scope(|scope| {
        for (chunk_idx, chunk) in out.chunks_mut(rows_per * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (local, row) in chunk.chunks_mut(row_len).enumerate() {
                    f(chunk_idx * rows_per + local, row);
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_every_row_once() {
        let mut out = vec![0.0; 40_000];
        for_each_row(&mut out, 10, |i, row| {
            for v in row.iter_mut() {
                *v += i as f64;
            }
        });
        for (i, row) in out.chunks(10).enumerate() {
            assert!(row.iter().all(|&v| v == i as f64));
        }
    }
}
