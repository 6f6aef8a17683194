//! Noise-accumulation model for deep pipelines.
//!
//! Two chains absorb i.i.d. per-stage noise `delta_k` with variance
//! `sigma2`. The standard chain keeps everything:
//! `S_k = S_{k-1} + delta_k`, so `Var(S_k) = k * sigma2` grows without
//! bound. The routed chain is cut by a stop gate `Z_k ~ Bernoulli(p)`
//! applied after the stage: `N_k = (1 - Z_k) * (N_{k-1} + delta_k)`, giving
//! `Var(N_k) = (1-p) * (Var(N_{k-1}) + sigma2)`, which telescopes to
//! `sigma2 * (1-p) * (1 - (1-p)^k) / p` and saturates at
//! `sigma2 * (1-p) / p`.
//!
//! Each trial draws from its own RNG stream of the seed, so results are
//! identical no matter how trials are scheduled.

use std::io;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-stage noise law. Both choices have variance `sigma2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaDistribution {
    #[default]
    Normal,
    /// `+sigma` or `-sigma` with equal probability.
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Per-stage noise variance.
    pub sigma2: f64,
    /// Stop probability per stage.
    pub p: f64,
    /// Chain length.
    pub depth: usize,
    pub trials: u64,
    pub seed: u64,
    #[serde(default)]
    pub delta: DeltaDistribution,
}

/// Empirical and closed-form statistics for one depth of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthStats {
    pub depth: usize,
    pub mean: f64,
    pub empirical_var: f64,
    pub closed_var: f64,
    /// Asymptotic standard error of the empirical variance.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub params: NoiseParams,
    pub standard: Vec<DepthStats>,
    pub routed: Vec<DepthStats>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid simulation parameters: {detail}")]
pub struct SimError {
    pub detail: String,
}

/// `Var(S_k) = k * sigma2` for the standard chain.
pub fn standard_variance(sigma2: f64, k: usize) -> f64 {
    k as f64 * sigma2
}

/// `Var(N_k) = sigma2 * (1-p) * (1 - (1-p)^k) / p` for the routed chain
/// (the `p = 0` limit degenerates to the standard chain).
pub fn routed_variance(sigma2: f64, p: f64, k: usize) -> f64 {
    if p == 0.0 {
        return standard_variance(sigma2, k);
    }
    let q = 1.0 - p;
    sigma2 * q * (1.0 - q.powi(k as i32)) / p
}

/// Depth-independent ceiling of the routed chain, `sigma2 * (1-p) / p`.
pub fn routed_variance_limit(sigma2: f64, p: f64) -> f64 {
    assert!(p > 0.0, "the limit exists only for positive stop probability");
    sigma2 * (1.0 - p) / p
}

/// Running raw moments, enough for the variance and its standard error.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    s1: f64,
    s2: f64,
    s3: f64,
    s4: f64,
}

impl Moments {
    fn add(&mut self, x: f64) {
        self.n += 1;
        self.s1 += x;
        self.s2 += x * x;
        self.s3 += x * x * x;
        self.s4 += x * x * x * x;
    }

    fn mean(&self) -> f64 {
        self.s1 / self.n as f64
    }

    /// Unbiased sample variance.
    fn variance(&self) -> f64 {
        let n = self.n as f64;
        ((self.s2 - self.s1 * self.s1 / n) / (n - 1.0)).max(0.0)
    }

    /// Asymptotic standard error of the sample variance:
    /// `sqrt((m4 - s^4 (n-3)/(n-1)) / n)` with `m4` the central fourth moment.
    fn variance_stderr(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        let central4 =
            (self.s4 - 4.0 * m * self.s3 + 6.0 * m * m * self.s2 - 3.0 * n * m.powi(4)) / n;
        let s2 = self.variance();
        ((central4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
    }
}

fn validate(params: &NoiseParams) -> Result<(), SimError> {
    let fail = |detail: &str| Err(SimError { detail: detail.to_string() });
    if !params.sigma2.is_finite() || params.sigma2 < 0.0 {
        return fail("sigma2 must be finite and non-negative");
    }
    if !params.p.is_finite() || !(0.0..=1.0).contains(&params.p) {
        return fail("p must lie in [0, 1]");
    }
    if params.depth == 0 {
        return fail("depth must be at least 1");
    }
    if params.trials < 2 {
        return fail("at least 2 trials are needed to estimate a variance");
    }
    Ok(())
}

/// Runs both chains side by side over shared noise and gate draws, so the
/// comparison at each depth is paired.
pub fn simulate_noise_chain(params: &NoiseParams) -> Result<SimResult, SimError> {
    validate(params)?;
    let sigma = params.sigma2.sqrt();
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| SimError { detail: format!("noise law rejected: {e}") })?;

    let mut standard_acc = vec![Moments::default(); params.depth];
    let mut routed_acc = vec![Moments::default(); params.depth];
    for trial in 0..params.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(trial);
        let mut standard = 0.0f64;
        let mut routed = 0.0f64;
        for k in 0..params.depth {
            let delta = match params.delta {
                DeltaDistribution::Normal => normal.sample(&mut rng),
                DeltaDistribution::Rademacher => {
                    if rng.random::<bool>() {
                        sigma
                    } else {
                        -sigma
                    }
                }
            };
            let stop: bool = rng.random::<f64>() < params.p;
            standard += delta;
            routed = if stop { 0.0 } else { routed + delta };
            standard_acc[k].add(standard);
            routed_acc[k].add(routed);
        }
    }

    let stats = |acc: &[Moments], closed: &dyn Fn(usize) -> f64| {
        acc.iter()
            .enumerate()
            .map(|(i, m)| DepthStats {
                depth: i + 1,
                mean: m.mean(),
                empirical_var: m.variance(),
                closed_var: closed(i + 1),
                stderr: m.variance_stderr(),
            })
            .collect::<Vec<_>>()
    };
    Ok(SimResult {
        params: *params,
        standard: stats(&standard_acc, &|k| standard_variance(params.sigma2, k)),
        routed: stats(&routed_acc, &|k| routed_variance(params.sigma2, params.p, k)),
    })
}

/// Writes the result as CSV: header `depth,model,empirical_var,closed_var,stderr`,
/// then for each depth a `standard` row followed by a `routed` row.
pub fn write_sim_csv(result: &SimResult, out: &mut impl io::Write) -> io::Result<()> {
    writeln!(out, "depth,model,empirical_var,closed_var,stderr")?;
    for (s, r) in result.standard.iter().zip(&result.routed) {
        writeln!(out, "{},standard,{},{},{}", s.depth, s.empirical_var, s.closed_var, s.stderr)?;
        writeln!(out, "{},routed,{},{},{}", r.depth, r.empirical_var, r.closed_var, r.stderr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(trials: u64) -> NoiseParams {
        NoiseParams {
            sigma2: 1.0,
            p: 0.5,
            depth: 10,
            trials,
            seed: 42,
            delta: DeltaDistribution::Normal,
        }
    }

    #[test]
    fn closed_forms_match_hand_computations() {
        assert_eq!(standard_variance(1.0, 5), 5.0);
        assert_eq!(standard_variance(2.0, 3), 6.0);
        // Geometric sum by hand: 0.5 + 0.25 + 0.125.
        assert!((routed_variance(1.0, 0.5, 3) - 0.875).abs() < 1e-15);
        // One stage: surviving the gate keeps variance (1-p) * sigma2.
        assert!((routed_variance(2.0, 0.25, 1) - 1.5).abs() < 1e-15);
        assert_eq!(routed_variance_limit(1.0, 0.5), 1.0);
        assert!((routed_variance_limit(4.0, 0.2) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gates() {
        // p = 0: never cut, identical to the standard chain.
        for k in [1, 7, 40] {
            assert_eq!(routed_variance(1.5, 0.0, k), standard_variance(1.5, k));
        }
        // p = 1: always cut, no noise survives.
        for k in [1, 7, 40] {
            assert_eq!(routed_variance(1.5, 1.0, k), 0.0);
        }
    }

    #[test]
    fn closed_form_satisfies_its_recurrence() {
        for &p in &[0.1, 0.5, 0.9] {
            let mut recurrence = 0.0f64;
            for k in 1..=1000usize {
                recurrence = (1.0 - p) * (recurrence + 1.0);
                let closed = routed_variance(1.0, p, k);
                let denom = recurrence.abs().max(1e-300);
                assert!(
                    ((closed - recurrence) / denom).abs() < 1e-12,
                    "p={p} k={k}: {closed} vs {recurrence}"
                );
            }
        }
    }

    #[test]
    fn simulation_matches_closed_forms_within_error_bars() {
        let result = simulate_noise_chain(&params(20_000)).unwrap();
        for stats in result.standard.iter().chain(&result.routed) {
            assert!(stats.stderr > 0.0);
            let err = (stats.empirical_var - stats.closed_var).abs();
            assert!(
                err < 4.0 * stats.stderr,
                "depth {} off by {err} (> 4 x {})",
                stats.depth,
                stats.stderr
            );
            // Both chains are mean-zero.
            let mean_se = (stats.empirical_var / result.params.trials as f64).sqrt();
            assert!(stats.mean.abs() < 5.0 * mean_se.max(1e-9));
        }
        // The routed chain plateaus at the limit instead of growing.
        let limit = routed_variance_limit(1.0, 0.5);
        let last = result.routed.last().unwrap();
        assert!(last.empirical_var < limit + 4.0 * last.stderr);
        assert!(result.standard.last().unwrap().empirical_var > 5.0);
    }

    #[test]
    fn rademacher_noise_obeys_the_same_closed_forms() {
        let result = simulate_noise_chain(&NoiseParams {
            delta: DeltaDistribution::Rademacher,
            ..params(20_000)
        })
        .unwrap();
        for stats in result.standard.iter().chain(&result.routed) {
            let err = (stats.empirical_var - stats.closed_var).abs();
            assert!(err < 4.0 * stats.stderr.max(1e-9), "depth {}", stats.depth);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate_noise_chain(&params(500)).unwrap();
        let b = simulate_noise_chain(&params(500)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_layout_is_depth_major_with_paired_rows() {
        let result = simulate_noise_chain(&params(100)).unwrap();
        let mut buf = Vec::new();
        write_sim_csv(&result, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "depth,model,empirical_var,closed_var,stderr");
        assert_eq!(lines.len(), 1 + 2 * 10);
        assert!(lines[1].starts_with("1,standard,"));
        assert!(lines[2].starts_with("1,routed,"));
        assert!(lines[19].starts_with("10,standard,"));
        assert!(lines[20].starts_with("10,routed,"));
    }

    #[test]
    fn parameter_validation() {
        let bad = |f: fn(&mut NoiseParams)| {
            let mut p = params(100);
            f(&mut p);
            simulate_noise_chain(&p).unwrap_err()
        };
        assert!(bad(|p| p.sigma2 = -1.0).detail.contains("sigma2"));
        assert!(bad(|p| p.p = 1.5).detail.contains("p must"));
        assert!(bad(|p| p.p = f64::NAN).detail.contains("p must"));
        assert!(bad(|p| p.depth = 0).detail.contains("depth"));
        assert!(bad(|p| p.trials = 1).detail.contains("trials"));
    }
}
