//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) these fan work out over rayon;
//! without it they run the identical loop bodies sequentially. Work is only
//! ever split along dimensions whose per-item computation is independent and
//! internally sequential, so parallel and sequential builds produce
//! bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collect `f(0..n)` in index order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Zip two equally chunked buffers and run `f(i, a_i, b_i)` over the pairs.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_pair_mut<T, U, F>(
    a: &mut [T],
    chunk_a: usize,
    b: &mut [U],
    chunk_b: usize,
    f: F,
) where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
{
    a.par_chunks_mut(chunk_a)
        .zip(b.par_chunks_mut(chunk_b))
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_pair_mut<T, U, F>(
    a: &mut [T],
    chunk_a: usize,
    b: &mut [U],
    chunk_b: usize,
    f: F,
) where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
{
    for (i, (ca, cb)) in a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate() {
        f(i, ca, cb);
    }
}

/// Cap the global worker pool from the `NOISEFED_THREADS` env variable.
///
/// No-op when the variable is unset, invalid, or the pool is already built.
/// Sequential builds ignore it entirely.
pub fn configure_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(value) = std::env::var("NOISEFED_THREADS") {
            if let Ok(threads) = value.trim().parse::<usize>() {
                if threads >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build_global();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_visit_every_index() {
        let mut data = vec![0.0f64; 12];
        for_each_chunk_mut(&mut data, 3, |i, c| {
            for v in c.iter_mut() {
                *v = i as f64;
            }
        });
        assert_eq!(data[0], 0.0);
        assert_eq!(data[3], 1.0);
        assert_eq!(data[11], 3.0);
    }

    #[test]
    fn map_collect_preserves_order() {
        let out = map_collect(100, |i| i * i);
        assert_eq!(out[7], 49);
        assert_eq!(out.len(), 100);
    }
}
