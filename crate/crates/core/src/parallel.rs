//! Deterministic sharded execution. Work is split into shards whose results
//! depend only on the shard index, then reduced in index order, so the
//! outcome is identical whether shards run on one thread or many.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Worker cap from the `CSST_THREADS` environment variable; defaults to 1
/// (fully sequential).
pub fn worker_threads() -> usize {
    std::env::var("CSST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run `f(shard)` for `shard in 0..shards` and return results in shard
/// order. Uses at most `threads` workers; the result vector is byte-for-byte
/// independent of the worker count.
pub fn run_sharded<T, F>(shards: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || shards <= 1 {
        return (0..shards).map(f).collect();
    }
    let n_workers = threads.min(shards);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..shards).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let shard = next.fetch_add(1, Ordering::Relaxed);
                if shard >= shards {
                    break;
                }
                let result = f(shard);
                *slots[shard].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("shard completed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_arrive_in_shard_order() {
        let sequential = run_sharded(16, 1, |s| s * s);
        let parallel = run_sharded(16, 4, |s| s * s);
        assert_eq!(sequential, parallel);
        assert_eq!(sequential, (0..16).map(|s| s * s).collect::<Vec<_>>());
    }

    #[test]
    fn default_worker_count_is_one() {
        if std::env::var("CSST_THREADS").is_err() {
            assert_eq!(worker_threads(), 1);
        }
    }
}
