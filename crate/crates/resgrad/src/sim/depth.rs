//! Depth padding: stretches a pipeline to an arbitrary length by inserting
//! identity tool nodes between its first and second components. The padded
//! pipeline computes the same answer; only the path the signal (and any
//! backward feedback) must cross gets longer.

use std::collections::BTreeSet;

use crate::graph::{ComponentSpec, DecodingConfig, Graph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("base graph has no components")]
    EmptyBase,
    #[error("target depth {depth} is shallower than the base graph ({base} components)")]
    TooShallow { depth: usize, base: usize },
    #[error("no field of the first component feeds the second, so there is no edge to stretch")]
    NoCarriedField,
}

/// Returns a copy of `base` padded to exactly `depth` components by a chain
/// of identity tool nodes spliced into the edge between the first and second
/// components (appended after a single component). Inserted nodes copy one
/// fresh field to the next; the second component is rewired to read the last
/// copy. Register tools via [`crate::forward::ToolRegistry::identity_for_tools`].
pub fn build_identity_chain(base: &Graph, depth: usize) -> Result<Graph, ChainError> {
    if base.components.is_empty() {
        return Err(ChainError::EmptyBase);
    }
    if depth < base.components.len() {
        return Err(ChainError::TooShallow { depth, base: base.components.len() });
    }
    let extra = depth - base.components.len();
    if extra == 0 {
        return Ok(base.clone());
    }

    let first = &base.components[0];
    let carried = if base.components.len() >= 2 {
        let second = &base.components[1];
        first
            .output_fields
            .iter()
            .find(|f| second.input_fields.contains(f))
            .cloned()
            .ok_or(ChainError::NoCarriedField)?
    } else {
        first.output_fields.first().cloned().ok_or(ChainError::NoCarriedField)?
    };

    let mut used_fields: BTreeSet<String> = base.task_inputs.iter().cloned().collect();
    let mut used_ids: BTreeSet<String> = BTreeSet::new();
    for component in &base.components {
        used_ids.insert(component.id.clone());
        used_fields.extend(component.input_fields.iter().cloned());
        used_fields.extend(component.output_fields.iter().cloned());
    }

    let mut fresh_fields = Vec::with_capacity(extra);
    let mut counter = 1usize;
    while fresh_fields.len() < extra {
        let candidate = format!("{carried}_copy{counter}");
        if !used_fields.contains(&candidate) {
            used_fields.insert(candidate.clone());
            fresh_fields.push(candidate);
        }
        counter += 1;
    }
    let mut fresh_ids = Vec::with_capacity(extra);
    let mut counter = 1usize;
    while fresh_ids.len() < extra {
        let candidate = format!("identity_{counter}");
        if !used_ids.contains(&candidate) {
            used_ids.insert(candidate.clone());
            fresh_ids.push(candidate);
        }
        counter += 1;
    }

    let mut components = Vec::with_capacity(depth);
    components.push(first.clone());
    let mut prev_field = carried.clone();
    for (id, out_field) in fresh_ids.into_iter().zip(fresh_fields) {
        components.push(ComponentSpec {
            id,
            role_description: "passes its input field through unchanged".to_string(),
            prompt_text: String::new(),
            input_fields: vec![prev_field.clone()],
            output_fields: vec![out_field.clone()],
            optimizable: false,
            is_tool: true,
            decoding: DecodingConfig::default(),
        });
        prev_field = out_field;
    }
    for (index, component) in base.components.iter().enumerate().skip(1) {
        let mut component = component.clone();
        if index == 1 {
            for field in &mut component.input_fields {
                if *field == carried {
                    *field = prev_field.clone();
                }
            }
        }
        components.push(component);
    }
    Ok(Graph { task_inputs: base.task_inputs.clone(), components })
}
