//! Run-artifact export: the step history as JSONL, per-step feedback-token
//! and density trajectories as CSV, and the best-prompts checkpoint.
//!
//! Everything written here derives from [`TrainHistory`], which carries no
//! timestamps, so repeated identical runs export byte-identical files.

use std::fs;
use std::io;
use std::path::Path;

use crate::training::{BestCheckpoint, TrainHistory};

/// Quotes a CSV field only when it needs it (comma, quote, or newline).
fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// Writes `history.jsonl` (one step record per line), `tokens_per_step.csv`
/// (`step,feedback_tokens,stop_events`), and `density_history.csv`
/// (`step,component,rho`) into `dir`, creating it if needed.
pub fn export_metrics(history: &TrainHistory, dir: impl AsRef<Path>) -> io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut jsonl = String::new();
    for record in &history.steps {
        jsonl.push_str(&serde_json::to_string(record).map_err(io::Error::other)?);
        jsonl.push('\n');
    }
    fs::write(dir.join("history.jsonl"), jsonl)?;

    let mut tokens = String::from("step,feedback_tokens,stop_events\n");
    for record in &history.steps {
        tokens.push_str(&format!(
            "{},{},{}\n",
            record.step, record.feedback_tokens, record.stop_events
        ));
    }
    fs::write(dir.join("tokens_per_step.csv"), tokens)?;

    let mut density = String::from("step,component,rho\n");
    for record in &history.steps {
        for snapshot in &record.rho {
            density.push_str(&format!(
                "{},{},{}\n",
                record.step,
                csv_field(&snapshot.component),
                snapshot.rho
            ));
        }
    }
    fs::write(dir.join("density_history.csv"), density)?;
    Ok(())
}

/// Writes the best checkpoint as pretty JSON (`{"prompts": ..., "dev_score": ...}`).
pub fn write_best_prompts(best: &BestCheckpoint, path: impl AsRef<Path>) -> io::Result<()> {
    let mut json = serde_json::to_string_pretty(best).map_err(io::Error::other)?;
    json.push('\n');
    fs::write(path, json)
}

/// Reads a checkpoint written by [`write_best_prompts`].
pub fn read_best_prompts(path: impl AsRef<Path>) -> io::Result<BestCheckpoint> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{PromptVersion, RhoSnapshot, StepRecord};
    use std::collections::BTreeMap;

    fn history() -> TrainHistory {
        let record = |step: u64, rho: u64, tokens: u64, stops: u64| StepRecord {
            step,
            selected: (step > 0).then(|| "answerer".to_string()),
            prompt_updated: step > 0,
            dev_score: Some(step as f64 / 10.0),
            rho: vec![RhoSnapshot { component: "answerer".to_string(), rho }],
            stop_events: stops,
            feedback_tokens: tokens,
            prompt_versions: vec![PromptVersion { component: "answerer".to_string(), version: step }],
        };
        TrainHistory {
            steps: vec![record(0, 0, 0, 0), record(1, 2, 40, 1), record(2, 0, 12, 2)],
            best: BestCheckpoint {
                prompts: BTreeMap::from([("answerer".to_string(), "Be precise.".to_string())]),
                dev_score: 0.2,
            },
        }
    }

    #[test]
    fn exports_all_three_metric_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("artifacts");
        export_metrics(&history(), &out).unwrap();

        let jsonl = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 3);
        let first: StepRecord = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);

        let tokens = std::fs::read_to_string(out.join("tokens_per_step.csv")).unwrap();
        assert_eq!(tokens, "step,feedback_tokens,stop_events\n0,0,0\n1,40,1\n2,12,2\n");

        let density = std::fs::read_to_string(out.join("density_history.csv")).unwrap();
        assert_eq!(density, "step,component,rho\n0,answerer,0\n1,answerer,2\n2,answerer,0\n");
    }

    #[test]
    fn best_prompts_round_trip_with_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best_prompts.json");
        write_best_prompts(&history().best, &path).unwrap();

        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["prompts"]["answerer"], "Be precise.");
        assert_eq!(raw["dev_score"], 0.2);

        let back = read_best_prompts(&path).unwrap();
        assert_eq!(back, history().best);
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
