//! Update scheduling: decides which component's prompt the rewriter works
//! on next. The headline strategy samples components in proportion to
//! `exp(rho / tau)` over their accumulated feedback densities; uniform
//! random, round-robin, and greedy argmax serve as baselines.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{DensityEntry, DensityTable};
use crate::graph::ComponentId;

/// Default sampling temperature for density-weighted selection.
pub const DEFAULT_TAU: f64 = 1.0;

/// RNG stream reserved for scheduling draws, so selection stays reproducible
/// no matter how many draws other parts of the system make.
pub(crate) const SCHEDULER_STREAM: u64 = 1;

/// Component-selection policy for prompt updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform over optimizable components.
    Random,
    /// Cycles through optimizable components in declaration order.
    RoundRobin,
    /// Highest density wins; first declared wins ties.
    Greedy,
    /// Samples proportionally to `exp(rho / tau)`.
    #[default]
    DensityBoltzmann,
}

/// Strategy plus its temperature, as configured for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { strategy: Strategy::default(), tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("no optimizable components to schedule")]
    NoOptimizableComponents,
    #[error("scheduler temperature must be positive, got {tau}")]
    TauNotPositive { tau: f64 },
}

/// Selection probabilities proportional to `exp(rho / tau)`. The maximum
/// density is subtracted before exponentiation, which leaves the
/// distribution unchanged but keeps the exponentials bounded; with integer
/// densities the normalized weights are bit-identical under shifts.
pub fn boltzmann_probs(rhos: &[u64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    if rhos.is_empty() {
        return Vec::new();
    }
    let max = *rhos.iter().max().expect("non-empty") as f64;
    let weights: Vec<f64> = rhos.iter().map(|&r| ((r as f64 - max) / tau).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

fn optimizable_entries(densities: &DensityTable) -> Vec<(&ComponentId, &DensityEntry)> {
    densities.iter().filter(|(_, e)| e.optimizable).collect()
}

/// Draws one optimizable component according to the density-weighted
/// distribution.
pub fn boltzmann_select(
    densities: &DensityTable,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<ComponentId, SchedulerError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(SchedulerError::TauNotPositive { tau });
    }
    let entries = optimizable_entries(densities);
    if entries.is_empty() {
        return Err(SchedulerError::NoOptimizableComponents);
    }
    let rhos: Vec<u64> = entries.iter().map(|(_, e)| e.rho).collect();
    let probs = boltzmann_probs(&rhos, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(entries[i].0.clone());
        }
    }
    // Floating-point shortfall: the tail belongs to the last entry.
    Ok(entries.last().expect("non-empty").0.clone())
}

/// A strategy with its draw state. Selection consumes randomness from a
/// dedicated stream of the run's seed.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub strategy: Strategy,
    pub tau: f64,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SCHEDULER_STREAM);
        Self { strategy: config.strategy, tau: config.tau, cursor: 0, rng }
    }

    /// Picks the component whose prompt the rewriter should work on.
    pub fn select(&mut self, densities: &DensityTable) -> Result<ComponentId, SchedulerError> {
        let entries = optimizable_entries(densities);
        if entries.is_empty() {
            return Err(SchedulerError::NoOptimizableComponents);
        }
        match self.strategy {
            Strategy::Random => {
                let idx = self.rng.random_range(0..entries.len());
                Ok(entries[idx].0.clone())
            }
            Strategy::RoundRobin => {
                let idx = self.cursor % entries.len();
                self.cursor = idx + 1;
                Ok(entries[idx].0.clone())
            }
            Strategy::Greedy => {
                let mut best = 0;
                for (i, (_, e)) in entries.iter().enumerate().skip(1) {
                    if e.rho > entries[best].1.rho {
                        best = i;
                    }
                }
                Ok(entries[best].0.clone())
            }
            Strategy::DensityBoltzmann => boltzmann_select(densities, self.tau, &mut self.rng),
        }
    }
}
