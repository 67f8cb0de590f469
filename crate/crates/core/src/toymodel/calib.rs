use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Successor tokens per state in the Markov generator.
const FANOUT: usize = 4;

/// Seeded first-order Markov chain: every token has a few weighted successors.
#[derive(Clone, Debug)]
pub struct MarkovLanguage {
    vocab: usize,
    table: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

impl MarkovLanguage {
    pub fn new(vocab: usize, seed: u64) -> Result<Self> {
        if vocab == 0 {
            return Err(invalid("vocab must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fanout = FANOUT.min(vocab);
        let table = (0..vocab)
            .map(|_| {
                let next: Vec<usize> = (0..fanout).map(|_| rng.random_range(0..vocab)).collect();
                let weights: Vec<f64> = (0..fanout).map(|_| rng.random_range(0.1..1.0)).collect();
                (next, WeightedIndex::new(weights).expect("positive weights"))
            })
            .collect();
        Ok(Self { vocab, table })
    }

    pub fn sample(&self, count: usize, window_len: usize, seed: u64) -> Result<CalibrationSet> {
        if count == 0 || window_len < 2 {
            return Err(invalid("calibration needs count > 0 and window_len >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows = (0..count)
            .map(|_| {
                let mut tok = rng.random_range(0..self.vocab);
                let mut w = Vec::with_capacity(window_len);
                w.push(tok);
                while w.len() < window_len {
                    let (next, dist) = &self.table[tok];
                    tok = next[dist.sample(&mut rng)];
                    w.push(tok);
                }
                w
            })
            .collect();
        Ok(CalibrationSet { windows, seed, window_len, vocab: self.vocab })
    }
}

/// Fixed-length token windows drawn from a seeded first-order Markov chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub windows: Vec<Vec<usize>>,
    pub seed: u64,
    pub window_len: usize,
    pub vocab: usize,
}

impl CalibrationSet {
    pub const DEFAULT_COUNT: usize = 16;
    pub const DEFAULT_LEN: usize = 64;

    /// Windows from the language seeded by `seed`, sampled with the same seed.
    pub fn generate(vocab: usize, count: usize, window_len: usize, seed: u64) -> Result<Self> {
        MarkovLanguage::new(vocab, seed)?.sample(count, window_len, seed)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Total next-token targets across all windows.
    pub fn num_targets(&self) -> usize {
        self.windows.iter().map(|w| w.len().saturating_sub(1)).sum()
    }
}
