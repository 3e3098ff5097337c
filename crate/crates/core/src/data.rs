//! Token-window sampling shared by training, calibration and evaluation.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// `count` windows of `len` tokens starting at uniform random offsets.
pub fn random_windows<R: Rng>(corpus: &[usize], count: usize, len: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if len == 0 || corpus.len() < len {
        bail!(Data, "corpus of {} tokens cannot supply windows of {len}", corpus.len());
    }
    let last = corpus.len() - len;
    Ok((0..count)
        .map(|_| {
            let s = rng.random_range(0..=last);
            corpus[s..s + len].to_vec()
        })
        .collect())
}

/// Fixed held-out windows used to track perplexity during retraining.
pub fn validation_windows(corpus: &[usize], count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_windows(corpus, count, len, &mut rng)
}

/// Endless stream of flattened `rows × len` training batches.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    corpus: &'a [usize],
    rows: usize,
    len: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a [usize], rows: usize, len: usize, seed: u64) -> Result<Self> {
        if rows == 0 || len < 2 || corpus.len() < len {
            bail!(Data, "cannot draw {rows} x {len} batches from {} tokens", corpus.len());
        }
        Ok(Self { corpus, rows, len, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let last = self.corpus.len() - self.len;
        let mut out = Vec::with_capacity(self.rows * self.len);
        for _ in 0..self.rows {
            let s = self.rng.random_range(0..=last);
            out.extend_from_slice(&self.corpus[s..s + self.len]);
        }
        out
    }
}
