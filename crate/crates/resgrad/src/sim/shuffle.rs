//! Shuffle interventions: deliberately misalign one component's output
//! across a batch of trajectories and check that feedback routing blames
//! the components' *inputs* (upstream) rather than their prompts.
//!
//! Each trajectory receives the chosen node's output from a different
//! trajectory (a derangement, so nobody keeps their own), and every
//! downstream entry that consumed those fields sees the swapped values.
//! Ground truth: any consumer of the shuffled fields now holds an input
//! that cannot support its recorded output, so a correct router sends the
//! critique upstream.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward::{BackwardReport, RoutedFeedback};
use crate::forward::Trajectory;
use crate::graph::ComponentId;

/// A uniformly sampled permutation with no fixed points (rejection-sampled
/// Fisher-Yates). Requires `n >= 2`.
pub fn seeded_derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two elements");
    loop {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// What a correct router should conclude for one (example, component) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthLabel {
    pub example: usize,
    pub component: ComponentId,
    pub expected_upstream: bool,
}

/// A perturbed batch plus the labels the router is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleOutcome {
    pub batch: Vec<Trajectory>,
    /// One label per (example, consumer-of-the-shuffled-node) pair.
    pub truth: Vec<GroundTruthLabel>,
    /// `permutation[i]` is the index of the trajectory that donated its
    /// node output to trajectory `i`.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShuffleError {
    #[error("shuffle needs at least two trajectories, got {got}")]
    BatchTooSmall { got: usize },
    #[error("trajectory {example} has no entry for component {component:?}")]
    NodeNotInTrajectory { example: usize, component: String },
}

/// Swaps `node`'s recorded output across the batch by a seeded derangement,
/// patching the input slices of downstream entries that consumed it. Final
/// contexts are left alone: the intervention targets what the *router* sees
/// in the trace, not the scored answer.
pub fn shuffle_intervention(
    batch: &[Trajectory],
    node: &str,
    seed: u64,
) -> Result<ShuffleOutcome, ShuffleError> {
    if batch.len() < 2 {
        return Err(ShuffleError::BatchTooSmall { got: batch.len() });
    }
    for (example, trajectory) in batch.iter().enumerate() {
        if trajectory.entry(node).is_none() {
            return Err(ShuffleError::NodeNotInTrajectory {
                example,
                component: node.to_string(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutation = seeded_derangement(batch.len(), &mut rng);

    let mut shuffled = batch.to_vec();
    let mut truth = Vec::new();
    for (example, trajectory) in shuffled.iter_mut().enumerate() {
        let donor_output = batch[permutation[example]]
            .entry(node)
            .expect("checked above")
            .output
            .clone();
        let position = trajectory
            .entries
            .iter()
            .position(|e| e.component_id == node)
            .expect("checked above");
        trajectory.entries[position].output = donor_output.clone();
        for later in &mut trajectory.entries[position + 1..] {
            let mut consumed = false;
            for (field, value) in donor_output.iter() {
                if later.input_slice.contains(field) {
                    later.input_slice.set(field, value);
                    consumed = true;
                }
            }
            if consumed {
                truth.push(GroundTruthLabel {
                    example,
                    component: later.component_id.clone(),
                    expected_upstream: true,
                });
            }
        }
    }
    Ok(ShuffleOutcome { batch: shuffled, truth, permutation })
}

/// One router verdict, reduced to the bit the intervention measures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributionRecord {
    pub example: usize,
    pub component: ComponentId,
    /// True when the router sent feedback past this component (upstream).
    pub upstream_feedback: bool,
}

/// Flattens backward reports into attribution records.
pub fn attribution_records(reports: &[BackwardReport]) -> Vec<AttributionRecord> {
    reports
        .iter()
        .flat_map(|report| {
            report.records.iter().map(move |record| AttributionRecord {
                example: report.example,
                component: record.component.clone(),
                upstream_feedback: matches!(
                    record.routed,
                    RoutedFeedback::PureUpstream { .. } | RoutedFeedback::Mixed { .. }
                ),
            })
        })
        .collect()
}

/// Raised when a ground-truth pair has no routing record to compare against.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no routing record for example {example}, component {component:?}")]
pub struct MisalignedRecords {
    pub example: usize,
    pub component: String,
}

/// Fraction of ground-truth labels the router agreed with. Every label must
/// have a matching record; an empty truth set is vacuously perfect.
pub fn attribution_accuracy(
    records: &[AttributionRecord],
    truth: &[GroundTruthLabel],
) -> Result<f64, MisalignedRecords> {
    if truth.is_empty() {
        return Ok(1.0);
    }
    let mut agree = 0usize;
    for label in truth {
        let record = records
            .iter()
            .find(|r| r.example == label.example && r.component == label.component)
            .ok_or_else(|| MisalignedRecords {
                example: label.example,
                component: label.component.clone(),
            })?;
        if record.upstream_feedback == label.expected_upstream {
            agree += 1;
        }
    }
    Ok(agree as f64 / truth.len() as f64)
}
