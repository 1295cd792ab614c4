//! Order-preserving fan-out of independent jobs.
//!
//! With the `parallel` feature the jobs run on a dedicated rayon pool of
//! `jobs` threads; without it they run one after another. Output order is
//! the input order either way.

use crate::error::{Error, Result};

/// Maps `f` over `items` sequentially.
pub fn map_sequential<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    F: Fn(&I) -> T,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `items` with at most `jobs` worker threads
/// (`None` = one per core).
#[cfg(feature = "parallel")]
pub fn map_jobs<I, T, F>(items: &[I], jobs: Option<usize>, f: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    use rayon::prelude::*;

    if jobs == Some(1) || items.len() <= 1 {
        return Ok(map_sequential(items, f));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

#[cfg(not(feature = "parallel"))]
pub fn map_jobs<I, T, F>(items: &[I], jobs: Option<usize>, f: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    if jobs == Some(0) {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    Ok(map_sequential(items, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matches_input_for_any_job_count() {
        let items: Vec<u64> = (0..17).collect();
        let expected: Vec<u64> = items.iter().map(|x| x * x).collect();
        for jobs in [None, Some(1), Some(3)] {
            assert_eq!(map_jobs(&items, jobs, |x| x * x).unwrap(), expected);
        }
    }
}
