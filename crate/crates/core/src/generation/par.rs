//! Deterministic chunked parallel map.

use crate::error::Result;

/// Splits `0..count` into chunks of `chunk` items, evaluates `f(lo, hi)` on
/// up to `threads` scoped workers (chunk `c` goes to worker `c % threads`)
/// and concatenates the results in chunk order.
pub(crate) fn map_chunks<T, F>(count: usize, chunk: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<Vec<T>> + Sync,
{
    let chunk = chunk.max(1);
    let bounds: Vec<(usize, usize)> = (0..count).step_by(chunk).map(|lo| (lo, (lo + chunk).min(count))).collect();
    let threads = threads.clamp(1, bounds.len().max(1));
    let mut slots: Vec<Option<Result<Vec<T>>>> = (0..bounds.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &(lo, hi)) in slots.iter_mut().zip(&bounds) {
            *slot = Some(f(lo, hi));
        }
    } else {
        let f = &f;
        let bounds = &bounds;
        let per_worker: Vec<Vec<(usize, Result<Vec<T>>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    s.spawn(move || {
                        (w..bounds.len()).step_by(threads).map(|c| (c, f(bounds[c].0, bounds[c].1))).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for (c, r) in per_worker.into_iter().flatten() {
            slots[c] = Some(r);
        }
    }
    let mut out = Vec::with_capacity(count);
    for r in slots {
        out.extend(r.expect("every chunk evaluated")?);
    }
    Ok(out)
}
