//! Pipeline graph: component declarations, static validation, execution order.
//!
//! A graph is an ordered list of components plus the set of task-input fields
//! the caller promises to supply at run time. Declaration order must already
//! be a valid execution order: every input field is either a task input or an
//! output of an earlier component. Task inputs are modeled internally as the
//! outputs of a virtual producer (id [`TASK_INPUT_ID`]) so that edge checks
//! treat them uniformly.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Identifier of a pipeline component.
pub type ComponentId = String;

/// Reserved id of the virtual component that "produces" the task inputs.
pub const TASK_INPUT_ID: &str = "__input__";

/// Sampling settings for one component's LLM calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    /// Sampling temperature, in `[0.0, 2.0]`.
    pub temperature: f64,
    /// Completion budget in tokens; must be at least 1.
    pub max_new_tokens: u32,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 1024,
        }
    }
}

/// One pipeline component: an LLM stage or a deterministic tool stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    /// Unique id within the graph.
    pub id: ComponentId,
    /// Human-readable statement of the component's job; quoted to the
    /// feedback analyst and the prompt rewriter, never sent in forward calls.
    pub role_description: String,
    /// System prompt for LLM components. The only mutable state during
    /// training. Tools ignore it.
    #[serde(default)]
    pub prompt_text: String,
    /// Fields this component reads, in render order. Non-empty, no duplicates.
    pub input_fields: Vec<String>,
    /// Fields this component writes. Non-empty, no duplicates, and globally
    /// unique across the graph.
    pub output_fields: Vec<String>,
    /// Whether training may rewrite `prompt_text`. Tools are never optimizable.
    #[serde(default)]
    pub optimizable: bool,
    /// Tool components run a registered callback instead of calling a backend.
    #[serde(default)]
    pub is_tool: bool,
    /// Decoding settings for forward calls.
    #[serde(default)]
    pub decoding: DecodingConfig,
}

/// Ordered pipeline of components plus the promised task-input fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    /// Fields supplied by the caller at run time.
    #[serde(default)]
    pub task_inputs: Vec<String>,
    /// Components in execution order.
    pub components: Vec<ComponentSpec>,
}

impl Graph {
    /// Component by id.
    pub fn get(&self, id: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.id == id)
    }

    /// Mutable component by id.
    pub fn get_mut(&mut self, id: &str) -> Option<&mut ComponentSpec> {
        self.components.iter_mut().find(|c| c.id == id)
    }

    /// Ids of optimizable components in declaration order.
    pub fn optimizable_ids(&self) -> Vec<ComponentId> {
        self.components
            .iter()
            .filter(|c| c.optimizable)
            .map(|c| c.id.clone())
            .collect()
    }

    /// Map from output field to the id of its producer. Task inputs map to
    /// [`TASK_INPUT_ID`]. With a valid graph every field has one producer.
    pub fn producers(&self) -> HashMap<String, ComponentId> {
        let mut map = HashMap::new();
        for field in &self.task_inputs {
            map.insert(field.clone(), TASK_INPUT_ID.to_string());
        }
        for comp in &self.components {
            for field in &comp.output_fields {
                map.insert(field.clone(), comp.id.clone());
            }
        }
        map
    }

    /// Ids of the components that consume any output field of `id`, in
    /// declaration order.
    pub fn consumers_of(&self, id: &str) -> Vec<ComponentId> {
        let Some(producer) = self.get(id) else {
            return Vec::new();
        };
        let outputs: HashSet<&String> = producer.output_fields.iter().collect();
        self.components
            .iter()
            .filter(|c| c.id != id && c.input_fields.iter().any(|f| outputs.contains(f)))
            .map(|c| c.id.clone())
            .collect()
    }

    /// Whether the inputs of `id` are drawn from two or more distinct
    /// non-virtual producers (a fan-in joint).
    pub fn has_fan_in(&self, id: &str) -> bool {
        let Some(comp) = self.get(id) else {
            return false;
        };
        let producers = self.producers();
        let distinct: HashSet<&ComponentId> = comp
            .input_fields
            .iter()
            .filter_map(|f| producers.get(f))
            .filter(|p| p.as_str() != TASK_INPUT_ID)
            .collect();
        distinct.len() >= 2
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Classes of static graph defects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Two components share an id, or a component uses the reserved id.
    DuplicateComponentId,
    ReservedComponentId,
    /// `input_fields` or `output_fields` is empty.
    EmptyFieldList,
    /// A field repeats within one component's declaration.
    DuplicateField,
    /// Field name does not match `[a-z0-9_]+`.
    InvalidFieldName,
    /// Two producers (components or task inputs) write the same field.
    SharedOutputField,
    /// An input field has no producer among task inputs or earlier components.
    UnboundInputField,
    /// A tool component is marked optimizable.
    ToolMarkedOptimizable,
    /// An optimizable component has an empty prompt.
    EmptyOptimizablePrompt,
    /// Temperature outside `[0.0, 2.0]`.
    TemperatureOutOfRange,
    /// `max_new_tokens` is zero.
    ZeroMaxTokens,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let name = match self {
            Self::DuplicateComponentId => "duplicate component id",
            Self::ReservedComponentId => "reserved component id",
            Self::EmptyFieldList => "empty field list",
            Self::DuplicateField => "duplicate field",
            Self::InvalidFieldName => "invalid field name",
            Self::SharedOutputField => "shared output field",
            Self::UnboundInputField => "unbound input field",
            Self::ToolMarkedOptimizable => "tool marked optimizable",
            Self::EmptyOptimizablePrompt => "empty prompt on optimizable component",
            Self::TemperatureOutOfRange => "temperature out of range",
            Self::ZeroMaxTokens => "max_new_tokens is zero",
        };
        f.write_str(name)
    }
}

/// One static defect found during validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Offending component, when the defect is attributable to one.
    pub component: Option<ComponentId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match &self.component {
            Some(id) => write!(f, "[{id}] {}: {}", self.kind, self.detail),
            None => write!(f, "{}: {}", self.kind, self.detail),
        }
    }
}

/// Exhaustive list of static defects; empty means the graph is executable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Whether `name` matches the field-name syntax `[a-z0-9_]+`.
pub fn is_valid_field_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Checks every structural invariant and reports all violations rather than
/// stopping at the first. Never fails.
pub fn validate_graph(graph: &Graph) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |kind, component: Option<&str>, detail: String| {
        report.violations.push(Violation {
            kind,
            component: component.map(str::to_owned),
            detail,
        });
    };

    // Task inputs behave as outputs of the virtual producer: same syntax and
    // same global-uniqueness rules as component outputs.
    let mut seen_outputs: HashMap<String, String> = HashMap::new();
    let mut task_seen = HashSet::new();
    for field in &graph.task_inputs {
        if !is_valid_field_name(field) {
            push(
                ViolationKind::InvalidFieldName,
                Some(TASK_INPUT_ID),
                format!("task input `{field}` must match [a-z0-9_]+"),
            );
        }
        if !task_seen.insert(field.clone()) {
            push(
                ViolationKind::DuplicateField,
                Some(TASK_INPUT_ID),
                format!("task input `{field}` is listed twice"),
            );
        }
        seen_outputs.insert(field.clone(), TASK_INPUT_ID.to_string());
    }

    let mut seen_ids = HashSet::new();
    let mut available: HashSet<String> = graph.task_inputs.iter().cloned().collect();

    for comp in &graph.components {
        let id = comp.id.as_str();

        if id == TASK_INPUT_ID {
            push(
                ViolationKind::ReservedComponentId,
                Some(id),
                format!("`{TASK_INPUT_ID}` is reserved for task inputs"),
            );
        }
        if !seen_ids.insert(comp.id.clone()) {
            push(
                ViolationKind::DuplicateComponentId,
                Some(id),
                "component id already used".into(),
            );
        }

        if comp.input_fields.is_empty() {
            push(
                ViolationKind::EmptyFieldList,
                Some(id),
                "input_fields is empty".into(),
            );
        }
        if comp.output_fields.is_empty() {
            push(
                ViolationKind::EmptyFieldList,
                Some(id),
                "output_fields is empty".into(),
            );
        }

        let mut in_seen = HashSet::new();
        for field in &comp.input_fields {
            if !is_valid_field_name(field) {
                push(
                    ViolationKind::InvalidFieldName,
                    Some(id),
                    format!("input field `{field}` must match [a-z0-9_]+"),
                );
            }
            if !in_seen.insert(field.clone()) {
                push(
                    ViolationKind::DuplicateField,
                    Some(id),
                    format!("input field `{field}` is declared twice"),
                );
            }
            if !available.contains(field) {
                push(
                    ViolationKind::UnboundInputField,
                    Some(id),
                    format!("input field `{field}` is neither a task input nor produced earlier"),
                );
            }
        }

        let mut out_seen = HashSet::new();
        for field in &comp.output_fields {
            if !is_valid_field_name(field) {
                push(
                    ViolationKind::InvalidFieldName,
                    Some(id),
                    format!("output field `{field}` must match [a-z0-9_]+"),
                );
            }
            if !out_seen.insert(field.clone()) {
                push(
                    ViolationKind::DuplicateField,
                    Some(id),
                    format!("output field `{field}` is declared twice"),
                );
            }
            match seen_outputs.get(field) {
                Some(owner) => push(
                    ViolationKind::SharedOutputField,
                    Some(id),
                    format!("output field `{field}` is already produced by `{owner}`"),
                ),
                None => {
                    seen_outputs.insert(field.clone(), comp.id.clone());
                }
            }
            available.insert(field.clone());
        }

        if comp.is_tool && comp.optimizable {
            push(
                ViolationKind::ToolMarkedOptimizable,
                Some(id),
                "tool components have no prompt to optimize".into(),
            );
        }
        if comp.optimizable && comp.prompt_text.is_empty() {
            push(
                ViolationKind::EmptyOptimizablePrompt,
                Some(id),
                "optimizable components need a non-empty prompt".into(),
            );
        }
        if !(0.0..=2.0).contains(&comp.decoding.temperature) {
            push(
                ViolationKind::TemperatureOutOfRange,
                Some(id),
                format!("temperature {} outside [0.0, 2.0]", comp.decoding.temperature),
            );
        }
        if comp.decoding.max_new_tokens == 0 {
            push(
                ViolationKind::ZeroMaxTokens,
                Some(id),
                "max_new_tokens must be at least 1".into(),
            );
        }
    }

    report
}

// ---------------------------------------------------------------------------
// Execution order
// ---------------------------------------------------------------------------

/// Error raised when declaration order is not a valid execution order.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("component `{component}` reads `{field}` before any producer has run")]
pub struct OrderError {
    pub component: ComponentId,
    pub field: String,
}

/// Verifies the declaration order is executable (every input is a task input
/// or an earlier output) and returns component ids in that order.
pub fn topological_order(graph: &Graph) -> Result<Vec<ComponentId>, OrderError> {
    let mut available: HashSet<&str> = graph.task_inputs.iter().map(String::as_str).collect();
    let mut order = Vec::with_capacity(graph.components.len());
    for comp in &graph.components {
        for field in &comp.input_fields {
            if !available.contains(field.as_str()) {
                return Err(OrderError {
                    component: comp.id.clone(),
                    field: field.clone(),
                });
            }
        }
        for field in &comp.output_fields {
            available.insert(field);
        }
        order.push(comp.id.clone());
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Error raised by graph file I/O.
#[derive(Debug, thiserror::Error)]
pub enum GraphFileError {
    #[error("cannot read graph file `{path}`: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write graph file `{path}`: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("graph file `{path}` is not valid JSON: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Loads a graph from its canonical JSON file form.
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph, GraphFileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GraphFileError::Read {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| GraphFileError::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Canonical serialized form of a graph: pretty JSON plus trailing newline.
/// Saving a loaded graph is byte-stable: load(save(g)) == g and a second
/// save produces identical bytes.
pub fn graph_to_canonical_json(graph: &Graph) -> String {
    let mut text = serde_json::to_string_pretty(graph).expect("graph serialization cannot fail");
    text.push('\n');
    text
}

/// Saves a graph in its canonical file form.
pub fn save_graph(graph: &Graph, path: impl AsRef<Path>) -> Result<(), GraphFileError> {
    let path = path.as_ref();
    fs::write(path, graph_to_canonical_json(graph)).map_err(|source| GraphFileError::Write {
        path: path.display().to_string(),
        source,
    })
}
