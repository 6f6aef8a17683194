//! Append-only JSONL event log for training runs, and prompt-state replay
//! for crash recovery.
//!
//! Each line is one event: a monotonically increasing `seq`, a wall-clock
//! `ts_ms`, a `type` tag, and the event's fields. The log is the only run
//! artifact that carries timestamps; everything derived from
//! [`crate::training::TrainHistory`] stays byte-deterministic.
//!
//! A crash can tear the final line. Readers treat the first malformed line
//! as the end of the log, so replay recovers the state after the last
//! complete event.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::graph::{ComponentId, Graph};

/// Payload of one log line, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEventBody {
    RunStarted {
        seed: u64,
        steps: u64,
    },
    /// One projector decision during a backward walk.
    Routing {
        step: u64,
        example: usize,
        component: ComponentId,
        local_present: bool,
        /// `"stop"` or `"feedback"`.
        upstream: String,
        feedback_tokens: u64,
    },
    PromptChanged {
        step: u64,
        component: ComponentId,
        version: u64,
        new_prompt: String,
    },
    /// Token usage for one scope (`forward`, `backward`, `optimizer`) of one step.
    Tokens {
        step: u64,
        scope: String,
        prompt_tokens: u64,
        completion_tokens: u64,
    },
    StepCompleted {
        step: u64,
        selected: Option<ComponentId>,
        prompt_updated: bool,
        dev_score: Option<f64>,
        stop_events: u64,
        feedback_tokens: u64,
    },
    Error {
        step: u64,
        example: Option<usize>,
        component: Option<ComponentId>,
        detail: String,
    },
    RunCompleted {
        best_dev_score: f64,
    },
}

/// One complete log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub body: RunEventBody,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Append-only event sink. Events are always retained in memory; file-backed
/// logs additionally write and flush each line as it is emitted.
#[derive(Debug)]
pub struct RunLog {
    writer: Option<BufWriter<File>>,
    seq: u64,
    retained: Vec<RunEvent>,
}

impl RunLog {
    /// Creates (or truncates) a log file at `path`.
    pub fn to_file(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self { writer: Some(BufWriter::new(file)), seq: 0, retained: Vec::new() })
    }

    /// A log that only retains events in memory.
    pub fn in_memory() -> Self {
        Self { writer: None, seq: 0, retained: Vec::new() }
    }

    /// Appends one event, assigning it the next sequence number.
    pub fn emit(&mut self, body: RunEventBody) -> io::Result<u64> {
        self.seq += 1;
        let event = RunEvent { seq: self.seq, ts_ms: now_ms(), body };
        if let Some(writer) = &mut self.writer {
            let line = serde_json::to_string(&event).map_err(io::Error::other)?;
            writer.write_all(line.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        self.retained.push(event);
        Ok(self.seq)
    }

    /// Everything emitted so far, in order.
    pub fn events(&self) -> &[RunEvent] {
        &self.retained
    }
}

/// Reads events from a log file, stopping at the first malformed line (a
/// torn tail from a crash, or anything appended after one).
pub fn read_events(path: impl AsRef<Path>) -> io::Result<Vec<RunEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunEvent>(&line) {
            Ok(event) => events.push(event),
            Err(_) => break,
        }
    }
    Ok(events)
}

/// Reconstructs the prompt of every non-tool component as of the end of a
/// (possibly torn) log, starting from the prompts in `initial`.
pub fn replay_prompts(
    path: impl AsRef<Path>,
    initial: &Graph,
) -> io::Result<BTreeMap<ComponentId, String>> {
    let mut prompts: BTreeMap<ComponentId, String> = initial
        .components
        .iter()
        .filter(|c| !c.is_tool)
        .map(|c| (c.id.clone(), c.prompt_text.clone()))
        .collect();
    for event in read_events(path)? {
        if let RunEventBody::PromptChanged { component, new_prompt, .. } = event.body {
            prompts.insert(component, new_prompt);
        }
    }
    Ok(prompts)
}
