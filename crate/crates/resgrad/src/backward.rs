//! Feedback routing: walks a trajectory in reverse, asks the projector
//! backend to split the incoming critique into a local part (for the
//! component's own prompt) and an upstream part (for its producers), and
//! folds the results into per-component densities and feedback buffers.
//!
//! Routing semantics for one component, given its parsed projector output:
//!
//! * local text + `STOP_GRADIENT`  -> pure local fault; propagation stops.
//! * no local + upstream text      -> pure upstream fault; text travels on.
//! * local text + upstream text    -> mixed fault; both happen.
//! * no local + `STOP_GRADIENT`    -> normalized to a plain stop: nothing is
//!   buffered and propagation stops. (The instructions forbid this output,
//!   but the parser is total, so it must mean *something*.)
//!
//! Tool components never receive projector calls; the signal passes through
//! them unchanged. A stop truncates the walk: no earlier component receives
//! a projector call at all.

use std::collections::BTreeMap;

use crate::backend::{Backend, BackendError, ChatRequest, TokenUsage};
use crate::context::Context;
use crate::forward::{render_fields, Trajectory};
use crate::graph::{ComponentId, ComponentSpec, Graph};
use crate::prompts;
use crate::reward::GoldSpec;

/// Sentinel a projector emits in its UPSTREAM section to halt propagation.
pub const STOP_TOKEN: &str = "STOP_GRADIENT";

/// Source label used for the critique derived from the task objective.
pub const OBJECTIVE_SOURCE: &str = "objective";

/// Sampling temperature for projector calls.
pub const BACKWARD_TEMPERATURE: f64 = 0.4;

/// Completion budget for projector calls.
pub const BACKWARD_MAX_NEW_TOKENS: u32 = 512;

/// Character cap applied to the context snippet stored with buffered
/// feedback and to the prompt excerpt shown to the projector.
pub const SNIPPET_CHAR_CAP: usize = 512;

fn excerpt(text: &str, cap: usize) -> String {
    if text.chars().count() <= cap {
        text.to_string()
    } else {
        text.chars().take(cap).collect()
    }
}

/// A critique travelling backwards through the pipeline, tagged with the
/// component (or objective) it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectiveFeedback {
    pub text: String,
    pub source: String,
}

impl ObjectiveFeedback {
    pub fn new(text: impl Into<String>, source: impl Into<String>) -> Self {
        Self { text: text.into(), source: source.into() }
    }
}

/// Builds the seed critique from the scored final answer. Callers skip the
/// backward walk entirely when the reward is already perfect.
pub fn objective_critique(final_context: &Context, gold: &GoldSpec, reward: f64) -> ObjectiveFeedback {
    let answer = final_context.get(&gold.field).unwrap_or("");
    ObjectiveFeedback {
        text: format!(
            "The final answer {answer} scored {reward} against gold {} under metric {}.",
            gold.value, gold.metric
        ),
        source: OBJECTIVE_SOURCE.to_string(),
    }
}

/// One component's routed share of an incoming critique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutedFeedback {
    /// Local fix only; nothing travels upstream.
    PureLocal { local: String },
    /// The fault lies with the inputs; the critique travels on unchanged in
    /// spirit (rewritten by the projector) and nothing is buffered here.
    PureUpstream { upstream: String },
    /// Both a local fix and an upstream critique.
    Mixed { local: String, upstream: String },
    /// No local fix and no upstream signal: propagation simply stops.
    Stop,
}

impl RoutedFeedback {
    /// The local critique, when one was produced.
    pub fn local(&self) -> Option<&str> {
        match self {
            RoutedFeedback::PureLocal { local } | RoutedFeedback::Mixed { local, .. } => Some(local),
            _ => None,
        }
    }

    /// The upstream critique, when propagation continues.
    pub fn upstream(&self) -> Option<&str> {
        match self {
            RoutedFeedback::PureUpstream { upstream } | RoutedFeedback::Mixed { upstream, .. } => {
                Some(upstream)
            }
            _ => None,
        }
    }

    /// True when the walk must not continue past this component.
    pub fn stops_propagation(&self) -> bool {
        self.upstream().is_none()
    }
}

/// Strips markdown emphasis and checks whether `line` is a `NAME:` section
/// header; returns the content that follows the colon on the same line.
fn header_inline<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let stripped = line
        .trim()
        .trim_start_matches(|c: char| matches!(c, '*' | '_' | '#' | '>' | '`' | ' ' | '\t'));
    let bytes = stripped.as_bytes();
    if bytes.len() < name.len() || !bytes[..name.len()].eq_ignore_ascii_case(name.as_bytes()) {
        return None;
    }
    let rest = stripped[name.len()..]
        .trim_start_matches(|c: char| matches!(c, '*' | '_' | '`' | ' ' | '\t'));
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_matches(|c: char| matches!(c, '*' | '_' | '`' | ' ' | '\t')))
}

/// True when `text`, ignoring wrapping emphasis/quotes and trailing
/// punctuation, is exactly the stop sentinel. Extra words disqualify it.
fn is_stop_token(text: &str) -> bool {
    let mut t = text.trim();
    loop {
        let next = t
            .trim_matches(|c: char| matches!(c, '*' | '_' | '`' | '"' | '\'' | ' ' | '\t'))
            .trim_end_matches(|c: char| matches!(c, '.' | '!' | ',' | ';' | ':'));
        if next == t {
            break;
        }
        t = next;
    }
    t.eq_ignore_ascii_case(STOP_TOKEN)
}

fn section_text(inline: &str, body: &[&str]) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(body.len() + 1);
    if !inline.is_empty() {
        parts.push(inline);
    }
    parts.extend(body);
    parts.join("\n").trim().to_string()
}

/// Total parser for projector completions. Well-formed completions carry a
/// `LOCAL:` section followed by an `UPSTREAM:` section (markdown emphasis
/// around the headers is tolerated). Anything else degrades gracefully: the
/// whole completion becomes a local critique, or a stop when it is blank.
pub fn parse_routed(completion: &str) -> RoutedFeedback {
    let lines: Vec<&str> = completion.lines().collect();
    let local_idx = lines.iter().position(|l| header_inline(l, "LOCAL").is_some());
    let fallback = || {
        let t = completion.trim();
        if t.is_empty() {
            RoutedFeedback::Stop
        } else {
            RoutedFeedback::PureLocal { local: t.to_string() }
        }
    };
    let Some(li) = local_idx else { return fallback() };
    let upstream_idx = (li + 1..lines.len()).find(|&i| header_inline(lines[i], "UPSTREAM").is_some());
    let Some(ui) = upstream_idx else { return fallback() };

    let local = section_text(header_inline(lines[li], "LOCAL").unwrap(), &lines[li + 1..ui]);
    let upstream = section_text(header_inline(lines[ui], "UPSTREAM").unwrap(), &lines[ui + 1..]);

    let stop = upstream.is_empty() || is_stop_token(&upstream);
    match (local.is_empty(), stop) {
        (false, true) => RoutedFeedback::PureLocal { local },
        (false, false) => RoutedFeedback::Mixed { local, upstream },
        (true, false) => RoutedFeedback::PureUpstream { upstream },
        (true, true) => RoutedFeedback::Stop,
    }
}

/// System message for projector calls: analyst persona plus the two-section
/// output contract.
pub fn backward_system_text() -> String {
    format!(
        "{}\n{}",
        prompts::BACKWARD_SYSTEM.trim_end_matches('\n'),
        prompts::BACKWARD_FORMAT.trim_end_matches('\n')
    )
}

/// Assembles the projector request for one component: its role, prompt,
/// observed input slice and output, where the output went, and the critique
/// that arrived from downstream.
pub fn build_backward_prompt(
    component: &ComponentSpec,
    input_slice: &Context,
    output: &Context,
    incoming: &ObjectiveFeedback,
    consumers: &[ComponentId],
) -> ChatRequest {
    let response_desc = if consumers.is_empty() {
        "input to downstream components".to_string()
    } else {
        consumers.join(", ")
    };
    let lm_input = render_fields(input_slice);
    let lm_output = render_fields(output);
    let variable_short = excerpt(&component.prompt_text, SNIPPET_CHAR_CAP);
    let user = prompts::fill(
        prompts::BACKWARD_CONTEXT,
        &[
            ("variable_desc", component.role_description.as_str()),
            ("system_prompt", component.prompt_text.as_str()),
            ("lm_input", lm_input.as_str()),
            ("lm_output", lm_output.as_str()),
            ("response_desc", response_desc.as_str()),
            ("objective_feedback", incoming.text.as_str()),
            ("variable_short", variable_short.as_str()),
        ],
    );
    ChatRequest {
        model: String::new(),
        system: backward_system_text(),
        user: user.trim_end_matches('\n').to_string(),
        temperature: BACKWARD_TEMPERATURE,
        max_new_tokens: BACKWARD_MAX_NEW_TOKENS,
    }
}

/// Per-component accumulation state for scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DensityEntry {
    /// Local critiques routed here since the last update of this component.
    pub rho: u64,
    /// Step at which this component's prompt last changed.
    pub t_last: u64,
    /// Whether the scheduler may pick this component at all.
    pub optimizable: bool,
}

/// Raised when feedback is recorded for a component the table doesn't know.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown component {component:?} in density table")]
pub struct UnknownComponent {
    pub component: ComponentId,
}

/// Gradient-density table over the non-tool components of a graph, kept in
/// graph declaration order so snapshots serialize deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensityTable {
    entries: Vec<(ComponentId, DensityEntry)>,
}

impl DensityTable {
    /// One zeroed entry per non-tool component, in declaration order.
    pub fn for_graph(graph: &Graph) -> Self {
        let entries = graph
            .components
            .iter()
            .filter(|c| !c.is_tool)
            .map(|c| {
                (c.id.clone(), DensityEntry { rho: 0, t_last: 0, optimizable: c.optimizable })
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, id: &str) -> Option<&DensityEntry> {
        self.entries.iter().find(|(cid, _)| cid == id).map(|(_, e)| e)
    }

    fn get_mut(&mut self, id: &str) -> Option<&mut DensityEntry> {
        self.entries.iter_mut().find(|(cid, _)| cid == id).map(|(_, e)| e)
    }

    /// `(id, entry)` pairs in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (&ComponentId, &DensityEntry)> {
        self.entries.iter().map(|(id, e)| (id, e))
    }

    /// `(id, rho)` pairs in declaration order.
    pub fn snapshot(&self) -> Vec<(ComponentId, u64)> {
        self.entries.iter().map(|(id, e)| (id.clone(), e.rho)).collect()
    }

    /// True when any component has unconsumed feedback.
    pub fn any_pending(&self) -> bool {
        self.entries.iter().any(|(_, e)| e.rho > 0)
    }

    /// Clears a component's density after its prompt was rewritten at `step`.
    pub fn reset(&mut self, id: &str, step: u64) -> Result<(), UnknownComponent> {
        let entry = self
            .get_mut(id)
            .ok_or_else(|| UnknownComponent { component: id.to_string() })?;
        entry.rho = 0;
        entry.t_last = step;
        Ok(())
    }
}

/// Bumps a component's density when (and only when) the routed feedback
/// carries a local part. `t_last` is untouched; it only moves on updates.
pub fn record_density(
    densities: &mut DensityTable,
    component: &str,
    routed: &RoutedFeedback,
) -> Result<(), UnknownComponent> {
    if routed.local().is_none() {
        return Ok(());
    }
    let entry = densities
        .get_mut(component)
        .ok_or_else(|| UnknownComponent { component: component.to_string() })?;
    entry.rho += 1;
    Ok(())
}

/// One buffered local critique, with enough context for the rewriter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackEntry {
    pub step: u64,
    pub local_text: String,
    /// Rendered input slice the component saw, capped at
    /// [`SNIPPET_CHAR_CAP`] characters.
    pub context_snippet: String,
}

/// Per-component queues of local critiques awaiting a prompt update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeedbackBuffer {
    entries: BTreeMap<ComponentId, Vec<FeedbackEntry>>,
}

impl FeedbackBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, id: impl Into<ComponentId>, entry: FeedbackEntry) {
        self.entries.entry(id.into()).or_default().push(entry);
    }

    /// Buffered critiques for `id`, oldest first.
    pub fn entries(&self, id: &str) -> &[FeedbackEntry] {
        self.entries.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self, id: &str) -> usize {
        self.entries(id).len()
    }

    /// Drops a component's queue after its prompt was rewritten.
    pub fn clear(&mut self, id: &str) {
        self.entries.remove(id);
    }

    /// Total buffered critiques across all components.
    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// The projector's decision for one component during one backward walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingRecord {
    pub component: ComponentId,
    pub routed: RoutedFeedback,
    /// Rendered input slice (capped) for the feedback buffer.
    pub context_snippet: String,
    /// Completion tokens the projector spent producing this decision.
    pub feedback_tokens: u64,
    /// True when this component's inputs come from several producers, i.e.
    /// its upstream critique is shared by all of them rather than being
    /// attributed to one.
    pub fan_in: bool,
}

/// Everything one backward walk produced, before any state mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardReport {
    pub step: u64,
    /// Position of the example within its batch.
    pub example: usize,
    /// Projector decisions in walk order (reverse execution order).
    pub records: Vec<RoutingRecord>,
    /// Tool components the signal crossed unchanged.
    pub passthrough: Vec<ComponentId>,
    /// Set when a projector call failed; records up to that point are kept.
    pub aborted: Option<BackendError>,
    /// Total projector usage (prompt and completion) across the walk.
    pub projector_usage: TokenUsage,
}

impl BackwardReport {
    /// Number of components at which propagation stopped (at most one per
    /// walk, but counted per record for aggregation across examples).
    pub fn stop_events(&self) -> u64 {
        self.records.iter().filter(|r| r.routed.stops_propagation()).count() as u64
    }

    /// Total projector completion tokens spent on this walk.
    pub fn feedback_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.feedback_tokens).sum()
    }
}

/// Walks the trajectory in reverse, calling the projector at every non-tool
/// component until a stop or the front of the pipeline. Pure with respect to
/// densities and buffers: pair with [`apply_report`] (or use
/// [`backward_pass`]) to commit the results. Walks for distinct examples may
/// therefore run concurrently and be committed in a deterministic order.
pub fn route_example(
    graph: &Graph,
    trajectory: &Trajectory,
    objective: &ObjectiveFeedback,
    projector: &dyn Backend,
    step: u64,
    example: usize,
) -> BackwardReport {
    let mut report = BackwardReport {
        step,
        example,
        records: Vec::new(),
        passthrough: Vec::new(),
        aborted: None,
        projector_usage: TokenUsage::default(),
    };
    let mut incoming = objective.clone();
    for entry in trajectory.entries.iter().rev() {
        let Some(component) = graph.get(&entry.component_id) else {
            // Trajectory from a different graph; nothing sensible to route.
            continue;
        };
        if component.is_tool {
            report.passthrough.push(component.id.clone());
            continue;
        }
        let consumers = graph.consumers_of(&component.id);
        let request =
            build_backward_prompt(component, &entry.input_slice, &entry.output, &incoming, &consumers);
        let response = match projector.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                report.aborted = Some(e);
                break;
            }
        };
        report.projector_usage += response.usage;
        let routed = parse_routed(&response.text);
        let upstream = routed.upstream().map(str::to_string);
        report.records.push(RoutingRecord {
            component: component.id.clone(),
            routed,
            context_snippet: excerpt(&render_fields(&entry.input_slice), SNIPPET_CHAR_CAP),
            feedback_tokens: response.usage.completion_tokens,
            fan_in: graph.has_fan_in(&component.id),
        });
        match upstream {
            Some(text) => incoming = ObjectiveFeedback { text, source: component.id.clone() },
            None => break,
        }
    }
    report
}

/// Commits one walk's decisions: every record with a local part bumps the
/// component's density and appends to its feedback buffer. Reports must be
/// applied in a fixed order (batch position) for deterministic state.
///
/// The density table must cover every non-tool component of the graph the
/// report was routed against (see [`DensityTable::for_graph`]).
pub fn apply_report(
    report: &BackwardReport,
    densities: &mut DensityTable,
    buffers: &mut FeedbackBuffer,
) -> Result<(), UnknownComponent> {
    for record in &report.records {
        record_density(densities, &record.component, &record.routed)?;
        if let Some(local) = record.routed.local() {
            buffers.append(
                record.component.clone(),
                FeedbackEntry {
                    step: report.step,
                    local_text: local.to_string(),
                    context_snippet: record.context_snippet.clone(),
                },
            );
        }
    }
    Ok(())
}

/// Routes one example and immediately commits the results.
#[allow(clippy::too_many_arguments)]
pub fn backward_pass(
    graph: &Graph,
    trajectory: &Trajectory,
    objective: &ObjectiveFeedback,
    projector: &dyn Backend,
    densities: &mut DensityTable,
    buffers: &mut FeedbackBuffer,
    step: u64,
    example: usize,
) -> Result<BackwardReport, UnknownComponent> {
    let report = route_example(graph, trajectory, objective, projector, step, example);
    apply_report(&report, densities, buffers)?;
    Ok(report)
}
