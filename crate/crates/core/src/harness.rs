//! Fan-out helpers for running many trajectories.

use std::sync::Arc;

use rayon::prelude::*;

use crate::backends::{RewardModel, StepGenerator};

/// The three model handles a run works with.
#[derive(Clone)]
pub struct Backends {
    pub draft: Arc<dyn StepGenerator>,
    pub target: Arc<dyn StepGenerator>,
    pub prm: Arc<dyn RewardModel>,
}

/// Evaluates `f(0..n)` on at most `concurrency` worker threads. The output
/// is in index order regardless of completion order.
pub fn run_indexed<T, F>(n: usize, concurrency: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if concurrency <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(concurrency).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}
