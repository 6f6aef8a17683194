//! Forward execution: prompt assembly, per-component calls, full pipeline runs.
//!
//! Each component sees only its projected input slice, rendered as labeled
//! text blocks, and contributes a delta that is merged onto the running
//! context. The executor logs one trajectory entry per component (inputs,
//! outputs, token usage) so later passes can reconstruct exactly what every
//! component saw and said.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, ChatRequest, TokenUsage};
use crate::context::{merge_outputs, project_inputs, Context, ContextError};
use crate::graph::{topological_order, ComponentId, ComponentSpec, Graph, OrderError};
use crate::reward::{compute_reward, GoldSpec, RewardError};

/// Sandbox/code-execution limits carried as configuration constants. The
/// executor itself runs no untrusted code; these document the budgets a real
/// execution tool is expected to enforce.
pub mod exec_limits {
    /// Address-space limit for executed code, in kilobytes.
    pub const MAX_AS_LIMIT_KB: u64 = 300_000;
    /// Data-segment limit for executed code, in kilobytes.
    pub const MAX_DATA_LIMIT_KB: u64 = 300_000;
    /// Stack limit for executed code, in kilobytes.
    pub const MAX_STACK_LIMIT_KB: u64 = 300_000;
    /// Minimum per-test wall-clock budget, in seconds.
    pub const MIN_TIME_LIMIT_SECS: u64 = 2;
    /// Extra budget granted beyond a reference solution's runtime, in seconds.
    pub const GT_TIME_LIMIT_SECS: u64 = 5;
}

/// Default cap for long trace-like fields (characters).
pub const TRACE_CHAR_CAP: usize = 3000;
/// Default cap for retrieved-evidence fields (characters).
pub const EVIDENCE_CHAR_CAP: usize = 1024;
/// Default number of retrieval hits a retriever tool should keep.
pub const DEFAULT_RETRIEVAL_TOP_K: usize = 20;

// ---------------------------------------------------------------------------
// Truncation policy
// ---------------------------------------------------------------------------

/// Per-field character caps applied to every component output before merging,
/// plus the retrieval breadth setting handed to retriever tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    /// Field name to maximum length in characters; uncapped fields pass through.
    #[serde(default)]
    pub caps: BTreeMap<String, usize>,
    /// How many retrieval hits a retriever tool keeps.
    #[serde(default = "default_top_k")]
    pub retrieval_top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_RETRIEVAL_TOP_K
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            caps: BTreeMap::new(),
            retrieval_top_k: DEFAULT_RETRIEVAL_TOP_K,
        }
    }
}

impl TruncationPolicy {
    pub fn with_cap(mut self, field: impl Into<String>, cap: usize) -> Self {
        self.caps.insert(field.into(), cap);
        self
    }

    /// Truncates `value` to the cap for `field`, keeping the prefix. Values at
    /// or under the cap (and uncapped fields) pass through unchanged.
    pub fn truncate(&self, field: &str, value: &str) -> String {
        match self.caps.get(field) {
            Some(&cap) => value.chars().take(cap).collect(),
            None => value.to_owned(),
        }
    }

    /// Applies per-field caps to every value of a delta.
    pub fn apply(&self, delta: &Context) -> Context {
        let mut out = Context::new();
        for (field, value) in delta.iter() {
            out.set(field, self.truncate(field, value));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Tools
// ---------------------------------------------------------------------------

/// Failure inside a tool callback.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("tool failed: {message}")]
pub struct ToolError {
    pub message: String,
}

impl ToolError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

/// Callback signature for tool components: projected inputs in, delta out.
pub type ToolFn = dyn Fn(&ComponentSpec, &Context) -> Result<Context, ToolError> + Send + Sync;

/// Tool callbacks keyed by component id. Real retrieval or code execution
/// plug in through [`ToolRegistry::register`]; the identity copy-through tool
/// is the only built-in.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    callbacks: HashMap<ComponentId, Arc<ToolFn>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `callback` for the tool component `id`.
    pub fn register(
        &mut self,
        id: impl Into<ComponentId>,
        callback: impl Fn(&ComponentSpec, &Context) -> Result<Context, ToolError> + Send + Sync + 'static,
    ) {
        self.callbacks.insert(id.into(), Arc::new(callback));
    }

    /// Registers the built-in identity tool for `id`: copies the component's
    /// single input field to its single output field unchanged.
    pub fn register_identity(&mut self, id: impl Into<ComponentId>) {
        self.register(id, |spec: &ComponentSpec, slice: &Context| {
            if spec.input_fields.len() != 1 || spec.output_fields.len() != 1 {
                return Err(ToolError::new(format!(
                    "identity tool `{}` needs exactly one input and one output field",
                    spec.id
                )));
            }
            let value = slice
                .get(&spec.input_fields[0])
                .ok_or_else(|| ToolError::new(format!("missing input `{}`", spec.input_fields[0])))?;
            Ok(Context::from_pairs([(spec.output_fields[0].clone(), value.to_owned())]))
        });
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ToolFn>> {
        self.callbacks.get(id)
    }

    /// A registry with the identity tool registered for every tool component
    /// of `graph`.
    pub fn identity_for_tools(graph: &crate::graph::Graph) -> Self {
        let mut registry = Self::new();
        for component in graph.components.iter().filter(|c| c.is_tool) {
            registry.register_identity(component.id.clone());
        }
        registry
    }
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

/// `retrieve_content` becomes `Retrieve Content`.
fn field_label(field: &str) -> String {
    field
        .split('_')
        .map(|word| {
            let mut chars = word.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders a context as blank-line-separated `Label:\nvalue` blocks, in the
/// context's iteration order.
pub fn render_fields(context: &Context) -> String {
    context
        .iter()
        .map(|(field, value)| format!("{}:\n{}", field_label(field), value))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Builds the chat call for one LLM component: its prompt as the system
/// message and the rendered input slice as the user message. Pure function of
/// its arguments, so a logged input slice replays to the identical request.
pub fn assemble_prompt(component: &ComponentSpec, input_slice: &Context) -> ChatRequest {
    ChatRequest {
        model: String::new(),
        system: component.prompt_text.clone(),
        user: render_fields(input_slice),
        temperature: component.decoding.temperature,
        max_new_tokens: component.decoding.max_new_tokens,
    }
}

// ---------------------------------------------------------------------------
// Completion post-processing
// ---------------------------------------------------------------------------

/// Strips one surrounding markdown code fence (with optional language tag)
/// and outer whitespace.
fn strip_code_fences(text: &str) -> String {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        if let Some((_first_line, body)) = rest.split_once('\n') {
            if let Some(inner) = body.trim_end().strip_suffix("```") {
                return inner.trim().to_owned();
            }
        }
    }
    trimmed.to_owned()
}

/// Error from executing one component.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComponentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    MissingInput(#[from] ContextError),
    #[error("component `{component}` did not emit required output field `{field}`")]
    OutputArityMismatch { component: String, field: String },
    #[error("component `{component}` emitted undeclared output field `{field}`")]
    UndeclaredOutput { component: String, field: String },
    #[error("tool component `{component}` has no registered callback")]
    ToolNotRegistered { component: String },
    #[error(transparent)]
    Tool(#[from] ToolError),
}

/// Maps a completion to the component's output delta.
///
/// Single-output components get the whole post-processed completion. Multi-
/// output components must emit `field: value` lines; continuation lines
/// attach to the most recent field, any declared field may appear in any
/// order, and a missing field is an arity error.
fn parse_completion(component: &ComponentSpec, completion: &str) -> Result<Context, ComponentError> {
    let cleaned = strip_code_fences(completion);
    if component.output_fields.len() == 1 {
        return Ok(Context::from_pairs([(component.output_fields[0].clone(), cleaned)]));
    }

    let mut collected: HashMap<&str, String> = HashMap::new();
    let mut current: Option<&str> = None;
    for line in cleaned.lines() {
        // Longest declared field whose `name:` header starts this line.
        let header = component
            .output_fields
            .iter()
            .filter_map(|field| {
                let rest = line.trim_start().strip_prefix(field.as_str())?;
                let rest = rest.trim_start();
                rest.strip_prefix(':').map(|value| (field.as_str(), value))
            })
            .max_by_key(|(field, _)| field.len());
        match header {
            Some((field, value)) => {
                collected.insert(field, value.trim().to_owned());
                current = Some(field);
            }
            None => {
                if let Some(field) = current {
                    let slot = collected.get_mut(field).expect("current field was inserted");
                    if !slot.is_empty() {
                        slot.push('\n');
                    }
                    slot.push_str(line.trim_end());
                }
                // Preamble lines before the first header are discarded.
            }
        }
    }

    let mut delta = Context::new();
    for field in &component.output_fields {
        match collected.remove(field.as_str()) {
            Some(value) => delta.set(field.clone(), value.trim().to_owned()),
            None => {
                return Err(ComponentError::OutputArityMismatch {
                    component: component.id.clone(),
                    field: field.clone(),
                })
            }
        }
    }
    Ok(delta)
}

// ---------------------------------------------------------------------------
// Component execution
// ---------------------------------------------------------------------------

/// Runs one component on its projected slice and returns its truncated output
/// delta plus token usage. Tool components run their registered callback and
/// use zero tokens; LLM components make exactly one backend call.
pub fn run_component(
    component: &ComponentSpec,
    input_slice: &Context,
    backend: &dyn Backend,
    tools: &ToolRegistry,
    policy: &TruncationPolicy,
) -> Result<(Context, TokenUsage), ComponentError> {
    let (delta, usage) = if component.is_tool {
        let callback = tools
            .get(&component.id)
            .ok_or_else(|| ComponentError::ToolNotRegistered {
                component: component.id.clone(),
            })?;
        let delta = callback(component, input_slice)?;
        // Tools must cover exactly their declared outputs.
        for field in delta.fields() {
            if !component.output_fields.iter().any(|f| f == field) {
                return Err(ComponentError::UndeclaredOutput {
                    component: component.id.clone(),
                    field: field.to_owned(),
                });
            }
        }
        for field in &component.output_fields {
            if !delta.contains(field) {
                return Err(ComponentError::OutputArityMismatch {
                    component: component.id.clone(),
                    field: field.clone(),
                });
            }
        }
        (delta, TokenUsage::default())
    } else {
        let request = assemble_prompt(component, input_slice);
        let response = backend.complete(&request)?;
        (parse_completion(component, &response.text)?, response.usage)
    };
    Ok((policy.apply(&delta), usage))
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

/// What one component saw, said, and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub component_id: ComponentId,
    /// Projected inputs the component received.
    pub input_slice: Context,
    /// Output delta after post-processing and truncation.
    pub output: Context,
    pub token_usage: TokenUsage,
}

/// Complete record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_input: Context,
    /// One entry per executed component, in execution order.
    pub entries: Vec<TrajectoryEntry>,
    pub final_context: Context,
}

impl Trajectory {
    /// Entry for `component_id`, if that component ran.
    pub fn entry(&self, component_id: &str) -> Option<&TrajectoryEntry> {
        self.entries.iter().find(|e| e.component_id == component_id)
    }
}

/// Outcome of a successful forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardResult {
    pub trajectory: Trajectory,
    /// Present exactly when a gold spec was supplied.
    pub reward: Option<f64>,
    /// Sum of token usage over all LLM calls in the pass.
    pub total_tokens: TokenUsage,
}

impl ForwardResult {
    pub fn final_context(&self) -> &Context {
        &self.trajectory.final_context
    }
}

/// Where and why a forward pass aborted, plus everything that ran before it.
#[derive(Debug, thiserror::Error)]
#[error("forward pass aborted at `{}`: {error}", component.as_deref().unwrap_or("<scoring>"))]
pub struct ForwardFailure {
    /// Component that failed; `None` when scoring the final answer failed.
    pub component: Option<ComponentId>,
    pub error: ForwardErrorKind,
    /// Entries completed before the abort; final_context holds the running
    /// context at abort time.
    pub partial: Trajectory,
}

/// Failure classes of a forward pass.
#[derive(Debug, thiserror::Error)]
pub enum ForwardErrorKind {
    #[error("declaration order is not executable: {0}")]
    Order(#[from] OrderError),
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Runs the whole pipeline on one task input. Aborts on the first component
/// error, returning the partial trajectory for diagnostics. When `gold` is
/// supplied the final context is scored and the reward recorded.
pub fn run_forward(
    graph: &Graph,
    task_input: &Context,
    backend: &dyn Backend,
    tools: &ToolRegistry,
    policy: &TruncationPolicy,
    gold: Option<&GoldSpec>,
) -> Result<ForwardResult, ForwardFailure> {
    let mut entries: Vec<TrajectoryEntry> = Vec::with_capacity(graph.components.len());
    let mut context = task_input.clone();

    let fail = |component: Option<ComponentId>,
                error: ForwardErrorKind,
                entries: Vec<TrajectoryEntry>,
                context: Context| ForwardFailure {
        component,
        error,
        partial: Trajectory {
            task_input: task_input.clone(),
            entries,
            final_context: context,
        },
    };

    if let Err(err) = topological_order(graph) {
        return Err(fail(None, err.into(), entries, context));
    }

    let mut total_tokens = TokenUsage::default();
    for component in &graph.components {
        let input_slice = match project_inputs(&context, component) {
            Ok(slice) => slice,
            Err(err) => {
                let id = component.id.clone();
                return Err(fail(Some(id), ComponentError::from(err).into(), entries, context));
            }
        };
        let (output, usage) = match run_component(component, &input_slice, backend, tools, policy) {
            Ok(pair) => pair,
            Err(err) => {
                let id = component.id.clone();
                return Err(fail(Some(id), err.into(), entries, context));
            }
        };
        context = merge_outputs(&context, &output);
        total_tokens += usage;
        entries.push(TrajectoryEntry {
            component_id: component.id.clone(),
            input_slice,
            output,
            token_usage: usage,
        });
    }

    let reward = match gold {
        Some(gold) => match compute_reward(&context, gold) {
            Ok(score) => Some(score),
            Err(err) => return Err(fail(None, err.into(), entries, context)),
        },
        None => None,
    };

    Ok(ForwardResult {
        trajectory: Trajectory {
            task_input: task_input.clone(),
            entries,
            final_context: context,
        },
        reward,
        total_tokens,
    })
}
