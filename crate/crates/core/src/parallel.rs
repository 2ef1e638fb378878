//! Deterministic batch-level parallelism.
//!
//! Compute is sharded over the batch dimension only: every batch element's
//! result is produced with a fixed sequential reduction order, so outputs
//! are bit-identical for any worker count. Cross-sample reductions (weight
//! and bias gradients) are summed sequentially in batch order after the
//! per-sample parts finish. Dispatch goes through rayon's pool when more
//! than one thread is requested; `threads <= 1` bypasses it entirely.

use rayon::prelude::*;

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    (0..n).into_par_iter().map(f).collect()
}

/// Run `f` over a vector of independent tasks (typically one per batch
/// element, each owning disjoint `&mut` output views).
pub fn for_each_task<T, F>(tasks: Vec<T>, threads: usize, f: F)
where
    T: Send,
    F: Fn(T) + Sync + Send,
{
    if threads <= 1 || tasks.len() <= 1 {
        for task in tasks {
            f(task);
        }
        return;
    }
    tasks.into_par_iter().for_each(f);
}

/// Run `f(sample_index, chunk)` over disjoint per-sample output chunks.
pub fn for_each_chunk<T, F>(chunks: Vec<(usize, &mut [T])>, threads: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for_each_task(chunks, threads, |(idx, chunk)| f(idx, chunk));
}
