//! Minimal fork-join helper for embarrassingly parallel per-sample work.
//!
//! Results are assembled by index, so the output is identical for any worker
//! count; `DFSS_THREADS` caps the number of workers.

pub const THREADS_ENV: &str = "DFSS_THREADS";

pub fn thread_count() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available);
    cap.min(available).max(1)
}

/// Apply `f` to every index/item pair, in parallel over contiguous chunks.
/// The output order matches the input order exactly.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = thread_count().min(items.len().max(1));
    if threads <= 1 || items.len() < 2 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut chunks: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, slice) in items.chunks(chunk).enumerate() {
            let base = ci * chunk;
            let f = &f;
            handles.push(scope.spawn(move || {
                slice.iter().enumerate().map(|(i, t)| f(base + i, t)).collect::<Vec<R>>()
            }));
        }
        for h in handles {
            chunks.push(h.join().expect("parallel worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for c in chunks {
        out.extend(c);
    }
    out
}
