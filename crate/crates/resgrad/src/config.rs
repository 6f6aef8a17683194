//! Run configuration files.
//!
//! A run config is one JSON document that wires a whole run together: the
//! graph file, the dataset splits, one backend per role (forward execution,
//! feedback analysis, prompt rewriting), truncation, loop hyperparameters,
//! and the scheduler. Loading resolves relative paths against the config
//! file's directory, fills defaults, and validates everything it can check
//! without executing — collecting *all* problems instead of stopping at the
//! first, so one load attempt reports every fix the file needs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, HttpBackend, HttpConfig, ScriptTable};
use crate::forward::TruncationPolicy;
use crate::scheduler::{SchedulerConfig, Strategy};
use crate::training::TrainConfig;

/// The config format revision this build reads.
pub const CONFIG_SCHEMA: u32 = 1;

/// Default directory for run artifacts, relative to the config file.
pub const DEFAULT_OUTPUT_DIR: &str = "out";

/// Where one backend role gets its completions from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Deterministic table of canned responses, loaded from a JSON file.
    Scripted { script: PathBuf },
    /// OpenAI-compatible HTTP endpoint.
    Http(HttpConfig),
}

/// The three backend roles of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendTriple {
    /// Executes pipeline components.
    pub forward: BackendSpec,
    /// Decomposes feedback into local and upstream parts.
    pub projector: BackendSpec,
    /// Rewrites prompts.
    pub optimizer: BackendSpec,
}

/// Dataset files by split. `test` is optional: training never touches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
}

/// A fully loaded run configuration: all paths absolute-or-config-relative
/// resolved, all defaults filled, all statically checkable rules verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub graph: PathBuf,
    pub datasets: DatasetPaths,
    pub backends: BackendTriple,
    pub truncation: TruncationPolicy,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub output_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config `{path}` is not valid: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config has {} problem(s):\n{}", problems.len(), problems.join("\n"))]
    Invalid { problems: Vec<String> },
    #[error("cannot initialize {role} backend: {detail}")]
    Backend { role: String, detail: String },
}

// ---------------------------------------------------------------------------
// Raw (on-disk) shape
// ---------------------------------------------------------------------------
//
// The raw structs accept strings where the resolved config wants enums so
// that a wrong value produces a collected problem naming the valid choices
// instead of a bare serde error. Unknown keys are still rejected at parse
// time (with line/column) because a silently ignored typo would quietly run
// with defaults.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: u32,
    graph: String,
    datasets: RawDatasets,
    backends: RawBackends,
    #[serde(default)]
    truncation: Option<TruncationPolicy>,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    scheduler: Option<RawScheduler>,
    #[serde(default)]
    output_dir: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDatasets {
    train: String,
    dev: String,
    #[serde(default)]
    test: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackends {
    forward: RawBackend,
    projector: RawBackend,
    optimizer: RawBackend,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    kind: String,
    #[serde(default)]
    script: Option<String>,
    #[serde(default)]
    base_url: Option<String>,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    max_attempts: Option<u32>,
    #[serde(default)]
    base_backoff_ms: Option<u64>,
    #[serde(default)]
    timeout_ms: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheduler {
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    tau: Option<f64>,
}

fn resolve_path(base: &Path, raw: &str) -> PathBuf {
    let raw = Path::new(raw);
    if raw.is_absolute() {
        raw.to_path_buf()
    } else {
        base.join(raw)
    }
}

fn check_file(path: &Path, what: &str, problems: &mut Vec<String>) {
    if !path.is_file() {
        problems.push(format!("{what}: file `{}` does not exist", path.display()));
    }
}

fn resolve_backend(
    raw: &RawBackend,
    role: &str,
    base: &Path,
    problems: &mut Vec<String>,
) -> Option<BackendSpec> {
    match raw.kind.as_str() {
        "scripted" => {
            for (field, present) in [
                ("base_url", raw.base_url.is_some()),
                ("model", raw.model.is_some()),
                ("max_attempts", raw.max_attempts.is_some()),
                ("base_backoff_ms", raw.base_backoff_ms.is_some()),
                ("timeout_ms", raw.timeout_ms.is_some()),
            ] {
                if present {
                    problems.push(format!(
                        "backends.{role}: `{field}` is only meaningful for kind \"http\""
                    ));
                }
            }
            let Some(script) = &raw.script else {
                problems.push(format!(
                    "backends.{role}: kind \"scripted\" requires a `script` path"
                ));
                return None;
            };
            let script = resolve_path(base, script);
            check_file(&script, &format!("backends.{role}.script"), problems);
            Some(BackendSpec::Scripted { script })
        }
        "http" => {
            if raw.script.is_some() {
                problems.push(format!(
                    "backends.{role}: `script` is only meaningful for kind \"scripted\""
                ));
            }
            let base_url = raw.base_url.clone();
            let model = raw.model.clone();
            if base_url.is_none() {
                problems.push(format!("backends.{role}: kind \"http\" requires `base_url`"));
            }
            if model.is_none() {
                problems.push(format!("backends.{role}: kind \"http\" requires `model`"));
            }
            let (Some(base_url), Some(model)) = (base_url, model) else {
                return None;
            };
            let defaults: HttpConfig = serde_json::from_value(serde_json::json!({
                "base_url": base_url,
                "model": model,
            }))
            .expect("two required fields always deserialize");
            Some(BackendSpec::Http(HttpConfig {
                max_attempts: raw.max_attempts.unwrap_or(defaults.max_attempts),
                base_backoff_ms: raw.base_backoff_ms.unwrap_or(defaults.base_backoff_ms),
                timeout_ms: raw.timeout_ms.unwrap_or(defaults.timeout_ms),
                ..defaults
            }))
        }
        other => {
            problems.push(format!(
                "backends.{role}: unknown kind `{other}` (expected \"scripted\" or \"http\")"
            ));
            None
        }
    }
}

fn resolve_scheduler(raw: Option<&RawScheduler>, problems: &mut Vec<String>) -> SchedulerConfig {
    let mut config = SchedulerConfig::default();
    let Some(raw) = raw else {
        return config;
    };
    if let Some(name) = &raw.strategy {
        match serde_json::from_value::<Strategy>(serde_json::Value::String(name.clone())) {
            Ok(strategy) => config.strategy = strategy,
            Err(_) => problems.push(format!(
                "scheduler.strategy: unknown strategy `{name}` (expected one of: \
                 random, round_robin, greedy, density_boltzmann)"
            )),
        }
    }
    if let Some(tau) = raw.tau {
        if tau.is_finite() && tau > 0.0 {
            config.tau = tau;
        } else {
            problems.push(format!("scheduler.tau: must be a positive finite number, got {tau}"));
        }
    }
    config
}

fn check_train(train: &TrainConfig, problems: &mut Vec<String>) {
    if train.examples_per_step == 0 {
        problems.push("train.examples_per_step: must be at least 1".to_string());
    }
    if train.update_freq == 0 {
        problems.push("train.update_freq: must be at least 1".to_string());
    }
    if train.max_concurrency == 0 {
        problems.push("train.max_concurrency: must be at least 1".to_string());
    }
    if !(0.0..=2.0).contains(&train.optimizer_temperature) {
        problems.push(format!(
            "train.optimizer_temperature: {} outside [0.0, 2.0]",
            train.optimizer_temperature
        ));
    }
    if train.optimizer_max_new_tokens == 0 {
        problems.push("train.optimizer_max_new_tokens: must be at least 1".to_string());
    }
}

/// Loads, resolves, and validates a run configuration.
///
/// Relative paths inside the file are taken relative to the file itself, so
/// a config directory can be moved or mounted anywhere as a unit.
pub fn load_config(path: impl AsRef<Path>) -> Result<ResolvedConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let raw: RawConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut problems = Vec::new();
    if raw.schema != CONFIG_SCHEMA {
        problems.push(format!(
            "schema: this build reads schema {CONFIG_SCHEMA}, got {}",
            raw.schema
        ));
    }

    let graph = resolve_path(base, &raw.graph);
    check_file(&graph, "graph", &mut problems);

    let datasets = DatasetPaths {
        train: resolve_path(base, &raw.datasets.train),
        dev: resolve_path(base, &raw.datasets.dev),
        test: raw.datasets.test.as_deref().map(|t| resolve_path(base, t)),
    };
    check_file(&datasets.train, "datasets.train", &mut problems);
    check_file(&datasets.dev, "datasets.dev", &mut problems);
    if let Some(test) = &datasets.test {
        check_file(test, "datasets.test", &mut problems);
    }

    let forward = resolve_backend(&raw.backends.forward, "forward", base, &mut problems);
    let projector = resolve_backend(&raw.backends.projector, "projector", base, &mut problems);
    let optimizer = resolve_backend(&raw.backends.optimizer, "optimizer", base, &mut problems);

    let train = raw.train.unwrap_or_default();
    check_train(&train, &mut problems);
    let scheduler = resolve_scheduler(raw.scheduler.as_ref(), &mut problems);

    if !problems.is_empty() {
        return Err(ConfigError::Invalid { problems });
    }
    Ok(ResolvedConfig {
        graph,
        datasets,
        backends: BackendTriple {
            // Unwraps are safe: a missing spec always pushed a problem.
            forward: forward.expect("checked above"),
            projector: projector.expect("checked above"),
            optimizer: optimizer.expect("checked above"),
        },
        truncation: raw.truncation.unwrap_or_default(),
        train,
        scheduler,
        output_dir: resolve_path(base, raw.output_dir.as_deref().unwrap_or(DEFAULT_OUTPUT_DIR)),
    })
}

/// Instantiates one backend role.
pub fn build_backend(spec: &BackendSpec, role: &str) -> Result<Box<dyn Backend>, ConfigError> {
    match spec {
        BackendSpec::Scripted { script } => {
            let table = ScriptTable::load(script).map_err(|e| ConfigError::Backend {
                role: role.to_string(),
                detail: e.to_string(),
            })?;
            Ok(Box::new(table))
        }
        BackendSpec::Http(config) => {
            let backend = HttpBackend::new(config.clone()).map_err(|e| ConfigError::Backend {
                role: role.to_string(),
                detail: e.detail.clone(),
            })?;
            Ok(Box::new(backend))
        }
    }
}
