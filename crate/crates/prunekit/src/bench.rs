//! Retraining throughput in tokens per second.

use std::time::{Duration, Instant};

use prunekit_core::model::TaggedModel;
use prunekit_core::retrain::{memory_audit, MemoryAudit, RetrainRecipe, RetrainSession};
use prunekit_core::Scalar;

use crate::error::{Error, Result};

/// Shortest accepted measurement window.
pub const MIN_DURATION: Duration = Duration::from_secs(5);
const WARMUP_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub tokens_per_sec: f64,
    pub steps: usize,
    pub elapsed: Duration,
    pub audit: MemoryAudit,
}

/// Runs retraining steps of `recipe` on `model` for at least `duration`
/// after a short warmup and reports training tokens per second.
pub fn bench_throughput<T: Scalar>(
    model: &TaggedModel<T>,
    recipe: &RetrainRecipe,
    lr: f64,
    train: &[usize],
    duration: Duration,
) -> Result<Throughput> {
    if duration < MIN_DURATION {
        return Err(Error::Measurement(format!("duration {duration:?} is shorter than {MIN_DURATION:?}")));
    }
    let audit = memory_audit(model, recipe)?;
    let mut session = RetrainSession::new(model, recipe, lr, train)?;
    for _ in 0..WARMUP_STEPS {
        session.step()?;
    }
    let start = Instant::now();
    let mut steps = 0;
    while start.elapsed() < duration {
        session.step()?;
        steps += 1;
    }
    let elapsed = start.elapsed();
    let tokens = (steps * session.tokens_per_step()) as f64;
    Ok(Throughput { tokens_per_sec: tokens / elapsed.as_secs_f64(), steps, elapsed, audit })
}
