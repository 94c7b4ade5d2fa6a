//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it, or
//! after [`set_sequential`], they run on the calling thread. Work is always
//! split into the same chunks and results are returned in chunk order, so both
//! paths produce bitwise-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces every helper in this module onto the calling thread.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || SEQUENTIAL.load(Ordering::SeqCst)
}

/// Reads `SPSNERF_THREADS`: `0` selects the sequential path, `n > 0` caps the
/// global rayon pool at `n` workers. Unset leaves the defaults alone.
pub fn configure_from_env() {
    let Ok(raw) = std::env::var("SPSNERF_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(0) => set_sequential(true),
        Ok(n) => {
            set_sequential(false);
            #[cfg(feature = "parallel")]
            {
                // Fails only if the pool was already built; the cap then stays as it was.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            #[cfg(not(feature = "parallel"))]
            let _ = n;
        }
        Err(_) => {}
    }
}

/// Maps `f` over `0..n` and collects in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over fixed-size chunks of `items` and collects one result per chunk.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    items.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Runs `f` on each mutable row chunk of `data` (rows of `row_len` elements).
pub fn for_each_row_mut<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let row_len = row_len.max(1);
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, r)| f(i, r));
        return;
    }
    data.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

/// Pairwise tree reduction in a fixed order, independent of thread count.
pub fn tree_reduce<T, F>(mut items: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_reduce_order_is_fixed() {
        let v: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let r = tree_reduce(v, |a, b| format!("({a}{b})")).unwrap();
        assert_eq!(r, "(((01)(23))4)");
        assert!(tree_reduce(Vec::<u8>::new(), |a, _| a).is_none());
    }

    #[test]
    fn chunks_come_back_in_order() {
        let data: Vec<u32> = (0..100).collect();
        let sums = map_chunks(&data, 7, |i, c| (i, c.iter().sum::<u32>()));
        assert_eq!(sums.len(), 15);
        assert!(sums.iter().enumerate().all(|(k, (i, _))| k == *i));
        assert_eq!(sums.iter().map(|s| s.1).sum::<u32>(), 4950);
    }
}
