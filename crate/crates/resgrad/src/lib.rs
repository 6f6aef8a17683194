//! Prompt optimization for multi-component LLM pipelines with routed,
//! additive feedback.
//!
//! A pipeline is an ordered graph of components, each reading declared fields
//! from a shared context and merging its outputs back in, so information
//! survives every stage untouched unless a component explicitly overwrites
//! it. Training runs the pipeline forward, turns scoring mistakes into
//! textual critiques, and walks them backwards through the graph: at every
//! component an analyst model splits the incoming critique into a *local*
//! part (kept as evidence against that component's prompt) and an *upstream*
//! part (forwarded to its producers, or stopped when earlier stages are
//! blameless). A scheduler then picks the component with the most
//! un-addressed local feedback and has a rewriter model revise its prompt.
//!
//! The crate ships deterministic scripted backends for hermetic runs, an
//! OpenAI-compatible HTTP backend for real models, a Monte-Carlo simulator
//! for comparing noise accumulation in standard vs routed feedback chains,
//! and a CLI wiring it all together (see [`cli`]).

pub mod backend;
pub mod backward;
pub mod cli;
pub mod config;
pub mod context;
pub mod dataset;
pub mod forward;
pub mod graph;
pub mod metrics;
pub mod optimizer;
pub mod prompts;
pub mod reward;
pub mod runlog;
pub mod scheduler;
pub mod sim;
pub mod training;

pub use backend::{Backend, ChatRequest, ChatResponse, ScriptTable, TokenUsage};
pub use backward::{backward_pass, parse_routed, DensityTable, FeedbackBuffer, RoutedFeedback};
pub use config::{load_config, ResolvedConfig};
pub use context::Context;
pub use dataset::{load_dataset, Example};
pub use forward::{run_forward, ToolRegistry, TruncationPolicy};
pub use graph::{load_graph, validate_graph, ComponentSpec, Graph};
pub use reward::{compute_reward, GoldSpec, Metric};
pub use scheduler::{SchedulerConfig, Strategy};
pub use training::{evaluate, run_training, TrainConfig, TrainEnv, TrainHistory};
