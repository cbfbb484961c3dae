//! Per-batch token-count sampling.
//!
//! A [`TokenSchedule`] is a discrete distribution over perfect-square token
//! counts. Each training batch draws one count by inverse CDF and every
//! sample in the batch uses it.

use std::io::Write;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::projector::token_side;
use crate::rng::SeedRng;

/// Stream id reserved for token-count draws.
pub const SCHEDULE_STREAM: u64 = 0x5C4E;

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSchedule {
    counts: Vec<usize>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TokenSchedule {
    /// Pairs are sorted by count; duplicates, non-squares, negative
    /// probabilities and sums further than 1e-9 from one are rejected.
    pub fn new(counts: &[usize], probs: &[f64]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidSchedule("no token counts".into()));
        }
        if counts.len() != probs.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} counts but {} probabilities",
                counts.len(),
                probs.len()
            )));
        }
        let mut pairs: Vec<(usize, f64)> = counts.iter().copied().zip(probs.iter().copied()).collect();
        pairs.sort_by_key(|&(n, _)| n);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidSchedule(format!("duplicate count {}", w[0].0)));
            }
        }
        for &(n, p) in &pairs {
            token_side(n).map_err(|_| Error::InvalidSchedule(format!("{n} is not a perfect square")))?;
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::InvalidSchedule(format!("probability {p} for count {n}")));
            }
        }
        let total: f64 = pairs.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidSchedule(format!("probabilities sum to {total}")));
        }
        let (counts, probs): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
        let cumulative = probs
            .iter()
            .scan(0.0, |acc, &p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            counts,
            probs,
            cumulative,
        })
    }

    /// Probabilities proportional to non-negative integer weights, e.g. `2:3:5`.
    pub fn from_ratios(counts: &[usize], weights: &[u64]) -> Result<Self> {
        let total: u64 = weights.iter().sum();
        if total == 0 {
            return Err(Error::InvalidSchedule("weights sum to zero".into()));
        }
        let probs: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
        Self::new(counts, &probs)
    }

    pub fn fixed(count: usize) -> Result<Self> {
        Self::new(&[count], &[1.0])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Inverse-CDF draw: the first count whose cumulative probability exceeds `u ~ U[0,1)`.
    pub fn sample(&self, rng: &mut SeedRng) -> usize {
        let u = rng.uniform();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0));
        self.counts[idx]
    }

    /// `Σ p_i·n_i`.
    pub fn expected_tokens(&self) -> f64 {
        self.counts
            .iter()
            .zip(&self.probs)
            .map(|(&n, &p)| p * n as f64)
            .sum()
    }

    /// Exact version of [`expected_tokens`](Self::expected_tokens), reading each
    /// probability as the simplest rational that rounds to it.
    pub fn expected_tokens_exact(&self) -> Ratio<i128> {
        self.counts
            .iter()
            .zip(self.exact_probs())
            .map(|(&n, p)| p * Ratio::from_integer(n as i128))
            .sum()
    }

    pub fn exact_probs(&self) -> Vec<Ratio<i128>> {
        self.probs.iter().map(|&p| rational_of(p)).collect()
    }
}

/// Simplest fraction (denominator ≤ 10⁹) within 1e-12 of `x`.
pub(crate) fn rational_of(x: f64) -> Ratio<i128> {
    // Stern-Brocot walk over continued-fraction convergents
    let (mut h0, mut h1, mut k0, mut k1) = (0i128, 1i128, 1i128, 0i128);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        let ai = a as i128;
        let (h2, k2) = (ai * h1 + h0, ai * k1 + k0);
        if k2 > 1_000_000_000 {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64) / (k1 as f64) - x).abs() <= 1e-12 || r - a < 1e-15 {
            break;
        }
        r = 1.0 / (r - a);
    }
    Ratio::new(h1, k1.max(1))
}

/// Draws one count per batch.
pub fn sample_token_count(schedule: &TokenSchedule, rng: &mut SeedRng) -> usize {
    schedule.sample(rng)
}

pub fn expected_tokens(schedule: &TokenSchedule) -> f64 {
    schedule.expected_tokens()
}

/// Per-batch token counts for one training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Exact vision-token total for batches of `batch_size` samples.
    pub fn total_tokens(&self, batch_size: usize) -> u64 {
        self.counts.iter().map(|&n| (n * batch_size) as u64).sum()
    }

    /// CSV with header `batch_index,N`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["batch_index", "N"])?;
        for (i, n) in self.counts.iter().enumerate() {
            out.write_record([i.to_string(), n.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("epoch plan", e))?;
        Ok(())
    }
}

/// One independent draw per batch from a dedicated stream of `seed`.
pub fn plan_epoch(schedule: &TokenSchedule, num_batches: usize, seed: u64) -> Result<EpochPlan> {
    if num_batches == 0 {
        return Err(Error::contract("an epoch plan needs at least one batch"));
    }
    let mut rng = SeedRng::stream(seed, SCHEDULE_STREAM);
    Ok(EpochPlan {
        counts: (0..num_batches).map(|_| schedule.sample(&mut rng)).collect(),
        seed,
    })
}
