//! Simulated iteration clock with an affine dependence on tree size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// `t = overhead + per_context_token * batch * seqlen + per_node * batch * size + noise`,
/// with noise uniform in `[-noise, noise]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub overhead: f64,
    pub per_context_token: f64,
    pub per_node: f64,
    pub noise: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            overhead: 10.0,
            per_context_token: 0.0005,
            per_node: 0.03,
            noise: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.overhead, self.per_context_token, self.per_node, self.noise];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("latency coefficients must be finite and non-negative".into());
        }
        if self.noise >= self.overhead {
            return Err("latency noise must stay below the fixed overhead".into());
        }
        Ok(())
    }

    /// Intercept for the given decode conditions.
    pub fn intercept(&self, batch: usize, mean_seqlen: f64) -> f64 {
        self.overhead + self.per_context_token * batch as f64 * mean_seqlen
    }

    /// Slope per tree node for the given batch size.
    pub fn slope(&self, batch: usize) -> f64 {
        self.per_node * batch as f64
    }

    /// Noise-free iteration time.
    pub fn mean(&self, size: f64, batch: usize, mean_seqlen: f64) -> f64 {
        self.intercept(batch, mean_seqlen) + self.slope(batch) * size
    }
}

/// A seeded noisy clock over a [`LatencyModel`].
#[derive(Debug, Clone)]
pub struct SimClock {
    model: LatencyModel,
    rng: ChaCha8Rng,
}

impl SimClock {
    pub fn new(model: LatencyModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn sample(&mut self, size: f64, batch: usize, mean_seqlen: f64) -> f64 {
        let base = self.model.mean(size, batch, mean_seqlen);
        if self.model.noise > 0.0 {
            base + self.rng.gen_range(-self.model.noise..=self.model.noise)
        } else {
            base
        }
    }
}
