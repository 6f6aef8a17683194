//! Meta-prompt templates shipped as text assets under `assets/prompts/`.
//!
//! The templates use `{name}` placeholders with `{{`/`}}` escaping for
//! literal braces. Filling is a single pass over the template: substituted
//! values are appended verbatim and never re-scanned, so braces inside
//! runtime values cannot inject further substitutions.

/// System prompt for the feedback analyst (failure triage persona).
pub const BACKWARD_SYSTEM: &str = include_str!("../assets/prompts/backward_system.txt");

/// Two-section output contract (LOCAL / UPSTREAM) appended to the analyst
/// system prompt.
pub const BACKWARD_FORMAT: &str = include_str!("../assets/prompts/backward_format.txt");

/// User-message template showing the analyst one component's trace.
pub const BACKWARD_CONTEXT: &str = include_str!("../assets/prompts/backward_context.txt");

/// System prompt for the prompt rewriter.
pub const OPTIMIZER_SYSTEM: &str = include_str!("../assets/prompts/optimizer_system.txt");

/// User-message template for batched prompt rewriting.
pub const OPTIMIZER_UPDATE: &str = include_str!("../assets/prompts/optimizer_update.txt");

/// Fills `{name}` placeholders from `values`, turning `{{` and `}}` into
/// literal braces. Unknown placeholders are kept as-is.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            // Unbalanced closing brace: keep literally.
            out.push('}');
            rest = &tail[1..];
        } else {
            // A `{name}` placeholder (or an unterminated `{`).
            match tail[1..].find(['{', '}']) {
                Some(end) if tail[1..].as_bytes()[end] == b'}' => {
                    let name = &tail[1..1 + end];
                    match values.iter().find(|(k, _)| *k == name) {
                        Some((_, value)) => out.push_str(value),
                        None => {
                            out.push('{');
                            out.push_str(name);
                            out.push('}');
                        }
                    }
                    rest = &tail[end + 2..];
                }
                _ => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_substituted() {
        let out = fill("a {x} b {y}", &[("x", "1"), ("y", "2")]);
        assert_eq!(out, "a 1 b 2");
    }

    #[test]
    fn double_braces_become_literals() {
        let out = fill("{start}{{new_prompt}}{end}", &[("start", "<T>"), ("end", "</T>")]);
        assert_eq!(out, "<T>{new_prompt}</T>");
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = fill("{a}", &[("a", "{b}"), ("b", "nope")]);
        assert_eq!(out, "{b}");
    }

    #[test]
    fn unknown_placeholders_survive() {
        assert_eq!(fill("{mystery} x", &[]), "{mystery} x");
        assert_eq!(fill("tail {", &[]), "tail {");
    }

    #[test]
    fn templates_carry_their_markers() {
        assert!(BACKWARD_SYSTEM.contains("failure analyst"));
        assert!(BACKWARD_FORMAT.contains("LOCAL:"));
        assert!(BACKWARD_FORMAT.contains("UPSTREAM:"));
        assert!(BACKWARD_FORMAT.contains("STOP_GRADIENT"));
        for marker in ["{variable_desc}", "{system_prompt}", "{lm_input}", "{lm_output}", "{response_desc}", "{objective_feedback}", "{variable_short}"] {
            assert!(BACKWARD_CONTEXT.contains(marker), "missing {marker}");
        }
        for marker in ["{variable_desc}", "{variable_short}", "{variable_context}", "{start_tag}", "{end_tag}"] {
            assert!(OPTIMIZER_UPDATE.contains(marker), "missing {marker}");
        }
        assert!(OPTIMIZER_SYSTEM.contains("optimization system"));
    }
}
