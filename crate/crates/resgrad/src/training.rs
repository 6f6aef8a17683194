//! The training loop: per step, sample a batch, run forwards concurrently,
//! route feedback backwards, update one component's prompt at the scheduled
//! cadence, and track dev-set performance with a best-checkpoint snapshot.
//!
//! Determinism: batch sampling and scheduling draw from per-purpose RNG
//! streams of the run seed; concurrent work is committed in batch order; all
//! serialized state uses ordered containers; and the history carries no
//! timestamps, so identical runs produce byte-identical artifacts.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, TokenUsage};
use crate::backward::{
    apply_report, objective_critique, route_example, BackwardReport, DensityTable, FeedbackBuffer,
    UnknownComponent,
};
use crate::dataset::Example;
use crate::forward::{run_forward, ToolRegistry, TruncationPolicy};
use crate::graph::{validate_graph, ComponentId, Graph};
use crate::optimizer::{build_update_prompt, extract_new_prompt, OPTIMIZER_MAX_NEW_TOKENS, OPTIMIZER_TEMPERATURE};
use crate::runlog::{RunEventBody, RunLog};
use crate::scheduler::{SchedulerConfig, SchedulerError, SchedulerState};

pub const DEFAULT_STEPS: u64 = 100;
pub const DEFAULT_EXAMPLES_PER_STEP: usize = 8;
pub const DEFAULT_UPDATE_FREQ: u64 = 1;
pub const DEFAULT_EVAL_REPEATS: u32 = 3;
pub const DEFAULT_TEST_REPEATS: u32 = 3;
pub const DEFAULT_MAX_CONCURRENCY: usize = 20;
pub const DEFAULT_SEED: u64 = 42;

/// RNG streams: scheduling uses stream 1 (see `scheduler`); the batch for
/// step `t` draws from `BATCH_STREAM_BASE + t`, so sampling is independent
/// of how much randomness anything else consumed.
pub(crate) const BATCH_STREAM_BASE: u64 = 1 << 32;

/// Loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of training steps.
    pub steps: u64,
    /// Examples sampled per step.
    pub examples_per_step: usize,
    /// A prompt update (and dev evaluation) happens every this many steps.
    pub update_freq: u64,
    /// Forward repeats per example when evaluating the dev set.
    pub eval_repeats: u32,
    /// Forward repeats per example when evaluating the test set.
    pub test_repeats: u32,
    /// Worker threads for concurrent forwards.
    pub max_concurrency: usize,
    pub seed: u64,
    /// Sampling temperature for rewriter calls.
    pub optimizer_temperature: f64,
    /// Completion budget for rewriter calls.
    pub optimizer_max_new_tokens: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            examples_per_step: DEFAULT_EXAMPLES_PER_STEP,
            update_freq: DEFAULT_UPDATE_FREQ,
            eval_repeats: DEFAULT_EVAL_REPEATS,
            test_repeats: DEFAULT_TEST_REPEATS,
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            seed: DEFAULT_SEED,
            optimizer_temperature: OPTIMIZER_TEMPERATURE,
            optimizer_max_new_tokens: OPTIMIZER_MAX_NEW_TOKENS,
        }
    }
}

/// The three backends plus pipeline plumbing a run needs.
#[derive(Clone, Copy)]
pub struct TrainEnv<'a> {
    /// Executes pipeline components.
    pub forward: &'a dyn Backend,
    /// Routes feedback (the analyst).
    pub projector: &'a dyn Backend,
    /// Rewrites prompts.
    pub optimizer: &'a dyn Backend,
    pub tools: &'a ToolRegistry,
    pub policy: &'a TruncationPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhoSnapshot {
    pub component: ComponentId,
    pub rho: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub component: ComponentId,
    pub version: u64,
}

/// Everything recorded about one step (step 0 is the baseline evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Component the scheduler picked, when an update was due.
    pub selected: Option<ComponentId>,
    pub prompt_updated: bool,
    /// Dev-set mean, present at the update cadence.
    pub dev_score: Option<f64>,
    /// Per-component feedback densities after this step, declaration order.
    pub rho: Vec<RhoSnapshot>,
    /// Backward walks that ended in a stop during this step.
    pub stop_events: u64,
    /// Projector completion tokens spent on feedback this step.
    pub feedback_tokens: u64,
    /// Prompt rewrite counts per component, declaration order.
    pub prompt_versions: Vec<PromptVersion>,
}

/// Prompts (and their dev score) of the best evaluation seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub prompts: BTreeMap<ComponentId, String>,
    pub dev_score: f64,
}

/// Deterministic record of a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub best: BestCheckpoint,
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub final_graph: Graph,
    pub densities: DensityTable,
    pub buffers: FeedbackBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub example: usize,
    /// Mean reward over repeats; failed forwards contribute zero.
    pub score: f64,
    /// Forward passes that aborted for this example.
    pub failures: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub mean: f64,
    pub per_example: Vec<ExampleScore>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("graph failed validation:\n{report}")]
    InvalidGraph { report: String },
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error("update_freq must be at least 1")]
    ZeroUpdateFreq,
    #[error("examples_per_step must be at least 1")]
    ZeroBatch,
    #[error("max_concurrency must be at least 1")]
    ZeroConcurrency,
    #[error(transparent)]
    Scheduler(SchedulerError),
    #[error(transparent)]
    Density(#[from] UnknownComponent),
    #[error("run log write failed: {0}")]
    Log(#[from] std::io::Error),
}

/// Applies `f` to every item, preserving input order in the results. Items
/// are striped across at most `workers` scoped threads.
pub(crate) fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < items.len() {
                        out.push((i, f(i, &items[i])));
                        i += workers;
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    indexed.sort_by_key(|&(i, _)| i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM_BASE + step);
    rng
}

/// Indices of one step's batch: `k` distinct indices when the pool is large
/// enough (a partial shuffle), otherwise `k` draws with replacement.
pub fn sample_batch(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n > 0, "cannot sample from an empty pool");
    if k <= n {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Scores a graph on a dataset: `repeats` forward passes per example, mean
/// reward overall. Failed passes score zero and are counted per example.
pub fn evaluate(
    graph: &Graph,
    dataset: &[Example],
    repeats: u32,
    forward_backend: &dyn Backend,
    tools: &ToolRegistry,
    policy: &TruncationPolicy,
    max_concurrency: usize,
) -> EvalResult {
    if dataset.is_empty() {
        return EvalResult { mean: 0.0, per_example: Vec::new() };
    }
    let repeats = repeats.max(1);
    let mut totals = vec![0.0f64; dataset.len()];
    let mut failures = vec![0u32; dataset.len()];
    for _ in 0..repeats {
        let scores = parallel_map(dataset, max_concurrency, |_, example| {
            run_forward(graph, &example.input, forward_backend, tools, policy, Some(&example.gold))
                .map(|result| result.reward.unwrap_or(0.0))
        });
        for (i, outcome) in scores.into_iter().enumerate() {
            match outcome {
                Ok(reward) => totals[i] += reward,
                Err(_) => failures[i] += 1,
            }
        }
    }
    let per_example = totals
        .iter()
        .zip(&failures)
        .enumerate()
        .map(|(example, (&total, &failed))| ExampleScore {
            example,
            score: total / repeats as f64,
            failures: failed,
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / (dataset.len() as f64 * repeats as f64);
    EvalResult { mean, per_example }
}

fn prompt_snapshot(graph: &Graph) -> BTreeMap<ComponentId, String> {
    graph
        .components
        .iter()
        .filter(|c| !c.is_tool)
        .map(|c| (c.id.clone(), c.prompt_text.clone()))
        .collect()
}

fn rho_snapshot(densities: &DensityTable) -> Vec<RhoSnapshot> {
    densities
        .snapshot()
        .into_iter()
        .map(|(component, rho)| RhoSnapshot { component, rho })
        .collect()
}

fn version_snapshot(graph: &Graph, versions: &BTreeMap<ComponentId, u64>) -> Vec<PromptVersion> {
    graph
        .components
        .iter()
        .filter(|c| !c.is_tool)
        .map(|c| PromptVersion { component: c.id.clone(), version: versions[&c.id] })
        .collect()
}

struct ExampleOutcome {
    forward_usage: TokenUsage,
    report: Option<BackwardReport>,
    failed_component: Option<ComponentId>,
    error: Option<String>,
}

/// Runs the full loop, mutating a clone of `graph` as prompts improve.
///
/// Per step: sample a batch, run forwards concurrently (routing feedback for
/// every imperfect, complete trajectory), commit routing results in batch
/// order, then at the update cadence pick one component, rewrite its prompt
/// from its buffered feedback, and evaluate the dev set. Failed forwards
/// score zero and route nothing; failed rewrites leave density, buffer, and
/// prompt untouched. Step 0 records the baseline dev evaluation.
pub fn run_training(
    graph: &Graph,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    scheduler: SchedulerConfig,
    env: &TrainEnv,
    log: &mut RunLog,
) -> Result<TrainOutcome, TrainError> {
    let report = validate_graph(graph);
    if !report.is_valid() {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(TrainError::InvalidGraph { report: lines.join("\n") });
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyDataset { which: "dev" });
    }
    if cfg.update_freq == 0 {
        return Err(TrainError::ZeroUpdateFreq);
    }
    if cfg.examples_per_step == 0 {
        return Err(TrainError::ZeroBatch);
    }
    if cfg.max_concurrency == 0 {
        return Err(TrainError::ZeroConcurrency);
    }

    let mut graph = graph.clone();
    let mut densities = DensityTable::for_graph(&graph);
    let mut buffers = FeedbackBuffer::new();
    let mut sched = SchedulerState::new(scheduler, cfg.seed);
    let mut versions: BTreeMap<ComponentId, u64> =
        graph.components.iter().filter(|c| !c.is_tool).map(|c| (c.id.clone(), 0)).collect();

    log.emit(RunEventBody::RunStarted { seed: cfg.seed, steps: cfg.steps })?;

    let baseline = evaluate(
        &graph,
        dev,
        cfg.eval_repeats,
        env.forward,
        env.tools,
        env.policy,
        cfg.max_concurrency,
    );
    let mut best = BestCheckpoint { prompts: prompt_snapshot(&graph), dev_score: baseline.mean };
    let mut steps = vec![StepRecord {
        step: 0,
        selected: None,
        prompt_updated: false,
        dev_score: Some(baseline.mean),
        rho: rho_snapshot(&densities),
        stop_events: 0,
        feedback_tokens: 0,
        prompt_versions: version_snapshot(&graph, &versions),
    }];
    log.emit(RunEventBody::StepCompleted {
        step: 0,
        selected: None,
        prompt_updated: false,
        dev_score: Some(baseline.mean),
        stop_events: 0,
        feedback_tokens: 0,
    })?;

    for step in 1..=cfg.steps {
        let mut rng = batch_rng(cfg.seed, step);
        let batch_idx = sample_batch(train.len(), cfg.examples_per_step, &mut rng);
        let batch: Vec<&Example> = batch_idx.iter().map(|&i| &train[i]).collect();

        // Forward and route each example concurrently; commit in batch order
        // below so shared state stays deterministic.
        let graph_ref = &graph;
        let outcomes: Vec<ExampleOutcome> =
            parallel_map(&batch, cfg.max_concurrency, |position, example| {
                match run_forward(
                    graph_ref,
                    &example.input,
                    env.forward,
                    env.tools,
                    env.policy,
                    Some(&example.gold),
                ) {
                    Ok(result) => {
                        let reward = result.reward.unwrap_or(0.0);
                        let report = if reward < 1.0 {
                            let objective =
                                objective_critique(result.final_context(), &example.gold, reward);
                            Some(route_example(
                                graph_ref,
                                &result.trajectory,
                                &objective,
                                env.projector,
                                step,
                                position,
                            ))
                        } else {
                            None
                        };
                        ExampleOutcome {
                            forward_usage: result.total_tokens,
                            report,
                            failed_component: None,
                            error: None,
                        }
                    }
                    Err(failure) => {
                        let usage = failure
                            .partial
                            .entries
                            .iter()
                            .fold(TokenUsage::default(), |acc, e| acc + e.token_usage);
                        ExampleOutcome {
                            forward_usage: usage,
                            report: None,
                            failed_component: failure.component.clone(),
                            error: Some(failure.to_string()),
                        }
                    }
                }
            });

        let mut forward_usage = TokenUsage::default();
        let mut backward_usage = TokenUsage::default();
        let mut stop_events = 0u64;
        let mut feedback_tokens = 0u64;
        for (position, outcome) in outcomes.iter().enumerate() {
            forward_usage += outcome.forward_usage;
            if let Some(detail) = &outcome.error {
                log.emit(RunEventBody::Error {
                    step,
                    example: Some(position),
                    component: outcome.failed_component.clone(),
                    detail: detail.clone(),
                })?;
            }
            let Some(report) = &outcome.report else { continue };
            apply_report(report, &mut densities, &mut buffers)?;
            backward_usage += report.projector_usage;
            stop_events += report.stop_events();
            feedback_tokens += report.feedback_tokens();
            for record in &report.records {
                log.emit(RunEventBody::Routing {
                    step,
                    example: position,
                    component: record.component.clone(),
                    local_present: record.routed.local().is_some(),
                    upstream: if record.routed.stops_propagation() {
                        "stop".to_string()
                    } else {
                        "feedback".to_string()
                    },
                    feedback_tokens: record.feedback_tokens,
                })?;
            }
            if let Some(aborted) = &report.aborted {
                log.emit(RunEventBody::Error {
                    step,
                    example: Some(position),
                    component: None,
                    detail: format!("projector call failed: {aborted}"),
                })?;
            }
        }
        log.emit(RunEventBody::Tokens {
            step,
            scope: "forward".to_string(),
            prompt_tokens: forward_usage.prompt_tokens,
            completion_tokens: forward_usage.completion_tokens,
        })?;
        log.emit(RunEventBody::Tokens {
            step,
            scope: "backward".to_string(),
            prompt_tokens: backward_usage.prompt_tokens,
            completion_tokens: backward_usage.completion_tokens,
        })?;

        let update_due = step % cfg.update_freq == 0;
        let mut selected: Option<ComponentId> = None;
        let mut prompt_updated = false;
        if update_due && densities.any_pending() {
            match sched.select(&densities) {
                Ok(pick) => {
                    selected = Some(pick.clone());
                    let entries = buffers.entries(&pick).to_vec();
                    if entries.is_empty() {
                        // Selected a component with nothing buffered: a
                        // recorded no-op; densities and buffers stay put.
                    } else {
                        let component = graph.get(&pick).expect("scheduled component exists");
                        let mut request = build_update_prompt(component, &entries)
                            .expect("buffer checked non-empty");
                        request.temperature = cfg.optimizer_temperature;
                        request.max_new_tokens = cfg.optimizer_max_new_tokens;
                        match env.optimizer.complete(&request) {
                            Ok(response) => {
                                log.emit(RunEventBody::Tokens {
                                    step,
                                    scope: "optimizer".to_string(),
                                    prompt_tokens: response.usage.prompt_tokens,
                                    completion_tokens: response.usage.completion_tokens,
                                })?;
                                match extract_new_prompt(&response.text) {
                                    Ok(new_prompt) => {
                                        graph
                                            .get_mut(&pick)
                                            .expect("scheduled component exists")
                                            .prompt_text = new_prompt.clone();
                                        let version = versions
                                            .get_mut(&pick)
                                            .expect("versions cover non-tool components");
                                        *version += 1;
                                        let version = *version;
                                        densities.reset(&pick, step)?;
                                        buffers.clear(&pick);
                                        prompt_updated = true;
                                        log.emit(RunEventBody::PromptChanged {
                                            step,
                                            component: pick.clone(),
                                            version,
                                            new_prompt,
                                        })?;
                                    }
                                    Err(err) => {
                                        // Unusable completion: keep the old
                                        // prompt and the accumulated feedback.
                                        log.emit(RunEventBody::Error {
                                            step,
                                            example: None,
                                            component: Some(pick.clone()),
                                            detail: format!("prompt rewrite rejected: {err}"),
                                        })?;
                                    }
                                }
                            }
                            Err(err) => {
                                log.emit(RunEventBody::Error {
                                    step,
                                    example: None,
                                    component: Some(pick.clone()),
                                    detail: format!("optimizer call failed: {err}"),
                                })?;
                            }
                        }
                    }
                }
                Err(SchedulerError::NoOptimizableComponents) => {
                    // Feedback accumulated but nothing is allowed to change;
                    // updates are skipped for the whole run.
                }
                Err(err) => return Err(TrainError::Scheduler(err)),
            }
        }

        let dev_score = if update_due {
            Some(
                evaluate(
                    &graph,
                    dev,
                    cfg.eval_repeats,
                    env.forward,
                    env.tools,
                    env.policy,
                    cfg.max_concurrency,
                )
                .mean,
            )
        } else {
            None
        };
        if let Some(score) = dev_score {
            if score > best.dev_score {
                best = BestCheckpoint { prompts: prompt_snapshot(&graph), dev_score: score };
            }
        }

        log.emit(RunEventBody::StepCompleted {
            step,
            selected: selected.clone(),
            prompt_updated,
            dev_score,
            stop_events,
            feedback_tokens,
        })?;
        steps.push(StepRecord {
            step,
            selected,
            prompt_updated,
            dev_score,
            rho: rho_snapshot(&densities),
            stop_events,
            feedback_tokens,
            prompt_versions: version_snapshot(&graph, &versions),
        });
    }

    log.emit(RunEventBody::RunCompleted { best_dev_score: best.dev_score })?;
    let history = TrainHistory { steps, best };
    Ok(TrainOutcome { history, final_graph: graph, densities, buffers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::scripted::{ScriptRule, ScriptTable};
    use crate::backend::RecordingBackend;
    use crate::context::Context;
    use crate::graph::{ComponentSpec, DecodingConfig};
    use crate::reward::{GoldSpec, Metric};
    use crate::scheduler::Strategy;

    const BAD_PROMPT: &str = "Answer the question badly.";
    const GOOD_PROMPT: &str = "Answer the question with the exact expected phrase.";

    fn one_node_graph() -> Graph {
        Graph {
            task_inputs: vec!["question".to_string()],
            components: vec![ComponentSpec {
                id: "answerer".to_string(),
                role_description: "answers questions".to_string(),
                prompt_text: BAD_PROMPT.to_string(),
                input_fields: vec!["question".to_string()],
                output_fields: vec!["answer".to_string()],
                optimizable: true,
                is_tool: false,
                decoding: DecodingConfig::default(),
            }],
        }
    }

    fn example(question: &str, gold: &str) -> Example {
        Example {
            input: Context::from_pairs([("question", question)]),
            gold: GoldSpec {
                field: "answer".to_string(),
                value: gold.to_string(),
                metric: Metric::ExactMatch,
            },
        }
    }

    /// Forward backend keyed on the prompt text: the bad prompt answers
    /// wrongly, the good prompt answers correctly.
    fn forward_table() -> ScriptTable {
        ScriptTable::new(
            vec![
                ScriptRule::text(BAD_PROMPT, "wrong"),
                ScriptRule::text(GOOD_PROMPT, "right"),
            ],
            "unreachable",
        )
    }

    fn projector_table() -> ScriptTable {
        ScriptTable::fallback_only("LOCAL:\nstate the expected phrase exactly\nUPSTREAM:\nSTOP_GRADIENT")
    }

    fn optimizer_table() -> ScriptTable {
        ScriptTable::fallback_only(format!("<IMPROVED_PROMPT>{GOOD_PROMPT}</IMPROVED_PROMPT>"))
    }

    fn quick_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            examples_per_step: 1,
            max_concurrency: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = parallel_map(&items, 8, |i, &x| {
            if x % 7 == 0 {
                std::thread::sleep(std::time::Duration::from_micros(200));
            }
            (i, x * 2)
        });
        for (i, (idx, doubled)) in out.iter().enumerate() {
            assert_eq!((*idx, *doubled), (i, i * 2));
        }
        // Degenerate worker counts still work.
        assert_eq!(parallel_map(&items, 0, |_, &x| x), items);
        assert_eq!(parallel_map(&[] as &[usize], 4, |_, &x| x), Vec::<usize>::new());
    }

    #[test]
    fn batch_sampling_is_deterministic_distinct_and_in_range() {
        let mut a = batch_rng(42, 3);
        let mut b = batch_rng(42, 3);
        let batch_a = sample_batch(10, 4, &mut a);
        let batch_b = sample_batch(10, 4, &mut b);
        assert_eq!(batch_a, batch_b);
        let mut sorted = batch_a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "draws are distinct when the pool suffices");
        assert!(batch_a.iter().all(|&i| i < 10));

        // Oversized batches fall back to replacement.
        let with_replacement = sample_batch(3, 8, &mut batch_rng(42, 4));
        assert_eq!(with_replacement.len(), 8);
        assert!(with_replacement.iter().all(|&i| i < 3));

        // Different steps draw from different streams.
        assert_ne!(
            sample_batch(1000, 6, &mut batch_rng(42, 1)),
            sample_batch(1000, 6, &mut batch_rng(42, 2)),
        );
    }

    #[test]
    fn evaluate_means_failures_to_zero() {
        let graph = one_node_graph();
        let dataset = vec![example("easy", "right"), example("haunted", "whatever")];
        // The second example's question triggers a permanent backend error.
        let backend = ScriptTable::new(
            vec![
                ScriptRule::error("haunted", false, "backend refuses"),
                ScriptRule::text(BAD_PROMPT, "right"),
            ],
            "unreachable",
        );
        let tools = ToolRegistry::new();
        let policy = TruncationPolicy::default();
        let result = evaluate(&graph, &dataset, 2, &backend, &tools, &policy, 4);
        assert_eq!(result.per_example.len(), 2);
        assert_eq!(result.per_example[0].score, 1.0);
        assert_eq!(result.per_example[0].failures, 0);
        assert_eq!(result.per_example[1].score, 0.0);
        assert_eq!(result.per_example[1].failures, 2);
        assert!((result.mean - 0.5).abs() < 1e-12);

        let empty = evaluate(&graph, &[], 3, &backend, &tools, &policy, 4);
        assert_eq!(empty.mean, 0.0);
    }

    #[test]
    fn loop_improves_prompt_resets_density_and_tracks_best() {
        let graph = one_node_graph();
        let train = vec![example("q1", "right")];
        let dev = vec![example("d1", "right")];
        let forward = forward_table();
        let projector = RecordingBackend::new(projector_table());
        let optimizer = optimizer_table();
        let tools = ToolRegistry::new();
        let policy = TruncationPolicy::default();
        let env = TrainEnv {
            forward: &forward,
            projector: &projector,
            optimizer: &optimizer,
            tools: &tools,
            policy: &policy,
        };
        let mut log = RunLog::in_memory();
        let outcome = run_training(
            &graph,
            &train,
            &dev,
            &quick_cfg(3),
            SchedulerConfig { strategy: Strategy::DensityBoltzmann, tau: 1.0 },
            &env,
            &mut log,
        )
        .unwrap();

        // Step 0 is the baseline: bad prompt scores zero on dev.
        let baseline = &outcome.history.steps[0];
        assert_eq!(baseline.dev_score, Some(0.0));
        assert_eq!(baseline.prompt_versions[0].version, 0);

        // Step 1: feedback routed, prompt rewritten, density reset, dev perfect.
        let step1 = &outcome.history.steps[1];
        assert_eq!(step1.selected.as_deref(), Some("answerer"));
        assert!(step1.prompt_updated);
        assert_eq!(step1.dev_score, Some(1.0));
        assert_eq!(step1.rho[0].rho, 0, "density snapshot is post-reset");
        assert_eq!(step1.stop_events, 1);
        assert!(step1.feedback_tokens > 0);
        assert_eq!(step1.prompt_versions[0].version, 1);

        // Later steps: reward is perfect, so nothing routes and no update fires.
        let step2 = &outcome.history.steps[2];
        assert_eq!(step2.selected, None);
        assert!(!step2.prompt_updated);
        assert_eq!(step2.feedback_tokens, 0);
        assert_eq!(
            projector.call_count(),
            1,
            "projector only runs while the reward is imperfect"
        );

        assert_eq!(outcome.final_graph.get("answerer").unwrap().prompt_text, GOOD_PROMPT);
        assert_eq!(outcome.history.best.dev_score, 1.0);
        assert_eq!(outcome.history.best.prompts["answerer"], GOOD_PROMPT);
        assert_eq!(outcome.buffers.total(), 0);

        // The run log saw the prompt change with its version.
        let changed = log.events().iter().any(|e| {
            matches!(
                &e.body,
                RunEventBody::PromptChanged { step: 1, component, version: 1, new_prompt }
                    if component == "answerer" && new_prompt == GOOD_PROMPT
            )
        });
        assert!(changed);
    }

    #[test]
    fn failed_forward_scores_zero_and_routes_nothing() {
        let graph = one_node_graph();
        let train = vec![example("cursed", "right")];
        let dev = vec![example("d1", "right")];
        let forward = ScriptTable::new(
            vec![
                ScriptRule::error("cursed", false, "flaky infra"),
                ScriptRule::text(BAD_PROMPT, "wrong"),
            ],
            "unreachable",
        );
        let projector = RecordingBackend::new(projector_table());
        let optimizer = optimizer_table();
        let tools = ToolRegistry::new();
        let policy = TruncationPolicy::default();
        let env = TrainEnv {
            forward: &forward,
            projector: &projector,
            optimizer: &optimizer,
            tools: &tools,
            policy: &policy,
        };
        let mut log = RunLog::in_memory();
        let outcome = run_training(
            &graph,
            &train,
            &dev,
            &quick_cfg(1),
            SchedulerConfig::default(),
            &env,
            &mut log,
        )
        .unwrap();

        assert_eq!(projector.call_count(), 0, "incomplete trajectories are never routed");
        let step1 = &outcome.history.steps[1];
        assert_eq!(step1.selected, None, "no feedback, no update");
        assert_eq!(step1.rho[0].rho, 0);
        let failed = log.events().iter().any(|e| {
            matches!(
                &e.body,
                RunEventBody::Error { step: 1, example: Some(0), component: Some(c), .. }
                    if c == "answerer"
            )
        });
        assert!(failed, "forward failure is logged");
    }

    #[test]
    fn rejected_rewrite_keeps_prompt_density_and_buffer() {
        let graph = one_node_graph();
        let train = vec![example("q1", "right")];
        let dev = vec![example("d1", "right")];
        let forward = forward_table();
        let projector = projector_table();
        let optimizer = ScriptTable::fallback_only("no tags in this completion");
        let tools = ToolRegistry::new();
        let policy = TruncationPolicy::default();
        let env = TrainEnv {
            forward: &forward,
            projector: &projector,
            optimizer: &optimizer,
            tools: &tools,
            policy: &policy,
        };
        let mut log = RunLog::in_memory();
        let outcome = run_training(
            &graph,
            &train,
            &dev,
            &quick_cfg(2),
            SchedulerConfig::default(),
            &env,
            &mut log,
        )
        .unwrap();

        let step1 = &outcome.history.steps[1];
        assert_eq!(step1.selected.as_deref(), Some("answerer"));
        assert!(!step1.prompt_updated);
        assert_eq!(step1.rho[0].rho, 1, "density survives a rejected rewrite");
        assert_eq!(step1.prompt_versions[0].version, 0);
        assert_eq!(outcome.final_graph.get("answerer").unwrap().prompt_text, BAD_PROMPT);
        // Feedback kept accumulating in step 2.
        let step2 = &outcome.history.steps[2];
        assert_eq!(step2.rho[0].rho, 2);
        assert_eq!(outcome.buffers.len("answerer"), 2);
        let rejected = log
            .events()
            .iter()
            .any(|e| matches!(&e.body, RunEventBody::Error { detail, .. } if detail.contains("rewrite rejected")));
        assert!(rejected);
    }

    #[test]
    fn empty_buffer_selection_is_a_recorded_noop() {
        // Two optimizable components; only the second ever gets feedback.
        // Round-robin picks the first on step 1: a recorded no-op.
        let graph = Graph {
            task_inputs: vec!["question".to_string()],
            components: vec![
                ComponentSpec {
                    id: "rewriter".to_string(),
                    role_description: "rewrites".to_string(),
                    prompt_text: "Rewrite.".to_string(),
                    input_fields: vec!["question".to_string()],
                    output_fields: vec!["rewritten".to_string()],
                    optimizable: true,
                    is_tool: false,
                    decoding: DecodingConfig::default(),
                },
                ComponentSpec {
                    id: "answerer".to_string(),
                    role_description: "answers".to_string(),
                    prompt_text: BAD_PROMPT.to_string(),
                    input_fields: vec!["rewritten".to_string()],
                    output_fields: vec!["answer".to_string()],
                    optimizable: true,
                    is_tool: false,
                    decoding: DecodingConfig::default(),
                },
            ],
        };
        let train = vec![example("q1", "right")];
        let dev = vec![example("d1", "right")];
        let forward = ScriptTable::new(
            vec![
                ScriptRule::text("Rewrite.", "rewritten question"),
                ScriptRule::text(BAD_PROMPT, "wrong"),
                ScriptRule::text(GOOD_PROMPT, "right"),
            ],
            "unreachable",
        );
        // Only the answerer takes a local hit; the walk stops there.
        let projector =
            ScriptTable::fallback_only("LOCAL:\nuse the expected phrase\nUPSTREAM:\nSTOP_GRADIENT");
        let optimizer = optimizer_table();
        let tools = ToolRegistry::new();
        let policy = TruncationPolicy::default();
        let env = TrainEnv {
            forward: &forward,
            projector: &projector,
            optimizer: &optimizer,
            tools: &tools,
            policy: &policy,
        };
        let mut log = RunLog::in_memory();
        let outcome = run_training(
            &graph,
            &train,
            &dev,
            &quick_cfg(2),
            SchedulerConfig { strategy: Strategy::RoundRobin, tau: 1.0 },
            &env,
            &mut log,
        )
        .unwrap();

        let step1 = &outcome.history.steps[1];
        assert_eq!(step1.selected.as_deref(), Some("rewriter"));
        assert!(!step1.prompt_updated, "empty buffer means no rewrite");
        assert_eq!(step1.rho, vec![
            RhoSnapshot { component: "rewriter".to_string(), rho: 0 },
            RhoSnapshot { component: "answerer".to_string(), rho: 1 },
        ]);

        let step2 = &outcome.history.steps[2];
        assert_eq!(step2.selected.as_deref(), Some("answerer"));
        assert!(step2.prompt_updated);
        assert_eq!(step2.dev_score, Some(1.0));
    }

    #[test]
    fn runs_are_reproducible() {
        let graph = one_node_graph();
        let train: Vec<Example> =
            (0..6).map(|i| example(&format!("q{i}"), "right")).collect();
        let dev = vec![example("d1", "right"), example("d2", "right")];
        let cfg = TrainConfig {
            steps: 4,
            examples_per_step: 3,
            max_concurrency: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let forward = forward_table();
            let projector = projector_table();
            let optimizer = optimizer_table();
            let tools = ToolRegistry::new();
            let policy = TruncationPolicy::default();
            let env = TrainEnv {
                forward: &forward,
                projector: &projector,
                optimizer: &optimizer,
                tools: &tools,
                policy: &policy,
            };
            let mut log = RunLog::in_memory();
            let outcome = run_training(
                &graph,
                &train,
                &dev,
                &cfg,
                SchedulerConfig::default(),
                &env,
                &mut log,
            )
            .unwrap();
            serde_json::to_string(&outcome.history).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn precondition_errors() {
        let graph = one_node_graph();
        let train = vec![example("q", "right")];
        let dev = vec![example("d", "right")];
        let forward = forward_table();
        let projector = projector_table();
        let optimizer = optimizer_table();
        let tools = ToolRegistry::new();
        let policy = TruncationPolicy::default();
        let env = TrainEnv {
            forward: &forward,
            projector: &projector,
            optimizer: &optimizer,
            tools: &tools,
            policy: &policy,
        };

        let mut log = RunLog::in_memory();
        let err = run_training(
            &graph,
            &[],
            &dev,
            &quick_cfg(1),
            SchedulerConfig::default(),
            &env,
            &mut log,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset { which: "train" }));

        let err = run_training(
            &graph,
            &train,
            &dev,
            &TrainConfig { update_freq: 0, ..TrainConfig::default() },
            SchedulerConfig::default(),
            &env,
            &mut log,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::ZeroUpdateFreq));

        let mut bad_graph = one_node_graph();
        bad_graph.components[0].input_fields.push("ghost_field".to_string());
        let err = run_training(
            &bad_graph,
            &train,
            &dev,
            &quick_cfg(1),
            SchedulerConfig::default(),
            &env,
            &mut log,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::InvalidGraph { .. }));
    }
}
