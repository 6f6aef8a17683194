//! Prompt rewriting: batches a component's buffered local critiques into a
//! single rewriter call and extracts the revised prompt from the tagged
//! completion.

use crate::backend::ChatRequest;
use crate::backward::FeedbackEntry;
use crate::graph::ComponentSpec;
use crate::prompts;

/// Tag the rewriter must open its improved prompt with.
pub const IMPROVED_PROMPT_START_TAG: &str = "<IMPROVED_PROMPT>";

/// Tag the rewriter must close its improved prompt with.
pub const IMPROVED_PROMPT_END_TAG: &str = "</IMPROVED_PROMPT>";

/// Default sampling temperature for rewriter calls.
pub const OPTIMIZER_TEMPERATURE: f64 = 0.7;

/// Default completion budget for rewriter calls.
pub const OPTIMIZER_MAX_NEW_TOKENS: u32 = 512;

/// Raised when an update is requested for a component with no buffered
/// feedback to learn from.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("feedback buffer for {component:?} is empty")]
pub struct EmptyBuffer {
    pub component: String,
}

/// Why an improved prompt could not be pulled out of a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("improved-prompt tags not found in completion")]
    TagsNotFound,
    #[error("improved prompt between tags is empty")]
    EmptyPrompt,
}

/// Renders buffered critiques as numbered blocks: what the component saw,
/// then the fix the analyst asked for.
pub fn render_feedback_batch(entries: &[FeedbackEntry]) -> String {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "Feedback {n} (step {step}):\nContext: {context}\nLocal Fix: {fix}",
                n = i + 1,
                step = e.step,
                context = e.context_snippet,
                fix = e.local_text,
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Assembles the rewriter request for one component from its buffered
/// critiques. The component's full current prompt is shown, along with the
/// batch and the output tags the completion must use.
pub fn build_update_prompt(
    component: &ComponentSpec,
    entries: &[FeedbackEntry],
) -> Result<ChatRequest, EmptyBuffer> {
    if entries.is_empty() {
        return Err(EmptyBuffer { component: component.id.clone() });
    }
    let batch = render_feedback_batch(entries);
    let user = prompts::fill(
        prompts::OPTIMIZER_UPDATE,
        &[
            ("variable_desc", component.role_description.as_str()),
            ("variable_short", component.prompt_text.as_str()),
            ("variable_context", batch.as_str()),
            ("start_tag", IMPROVED_PROMPT_START_TAG),
            ("end_tag", IMPROVED_PROMPT_END_TAG),
        ],
    );
    Ok(ChatRequest {
        model: String::new(),
        system: prompts::OPTIMIZER_SYSTEM.trim_end_matches('\n').to_string(),
        user: user.trim_end_matches('\n').to_string(),
        temperature: OPTIMIZER_TEMPERATURE,
        max_new_tokens: OPTIMIZER_MAX_NEW_TOKENS,
    })
}

/// Pulls the improved prompt out of a rewriter completion: the text between
/// the first start tag and the first end tag after it, trimmed.
pub fn extract_new_prompt(completion: &str) -> Result<String, ExtractError> {
    let start = completion.find(IMPROVED_PROMPT_START_TAG).ok_or(ExtractError::TagsNotFound)?;
    let body_start = start + IMPROVED_PROMPT_START_TAG.len();
    let end = completion[body_start..]
        .find(IMPROVED_PROMPT_END_TAG)
        .ok_or(ExtractError::TagsNotFound)?;
    let prompt = completion[body_start..body_start + end].trim();
    if prompt.is_empty() {
        return Err(ExtractError::EmptyPrompt);
    }
    Ok(prompt.to_string())
}
