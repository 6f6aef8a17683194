//! Final-answer scoring against gold references.
//!
//! Two metrics: normalized exact match and token-level F1. Both normalize
//! text first (lowercase, trim, collapse whitespace runs) so formatting noise
//! never moves a score.

use std::collections::HashMap;
use std::fmt;

use serde::de::{Error as DeError, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::context::Context;

/// Scoring rule for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    F1,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Metric::ExactMatch => "exact_match",
            Metric::F1 => "f1",
        })
    }
}

/// Which output field to score, the reference text, and the metric.
///
/// Serialized as a two-key object: the answer field mapped to its reference
/// value, plus the reserved `metric` key — e.g.
/// `{"answer": "Paris", "metric": "exact_match"}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldSpec {
    /// Name of the scored output field.
    pub field: String,
    /// Reference value for that field.
    pub value: String,
    pub metric: Metric,
}

impl Serialize for GoldSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry(&self.field, &self.value)?;
        map.serialize_entry("metric", &self.metric)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for GoldSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct GoldVisitor;

        impl<'de> Visitor<'de> for GoldVisitor {
            type Value = GoldSpec;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object with one answer field and a `metric` key")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<GoldSpec, A::Error> {
                let mut metric: Option<Metric> = None;
                let mut answer: Option<(String, String)> = None;
                while let Some(key) = access.next_key::<String>()? {
                    if key == "metric" {
                        metric = Some(access.next_value()?);
                    } else if answer.is_none() {
                        answer = Some((key, access.next_value()?));
                    } else {
                        return Err(A::Error::custom(format!(
                            "gold object has more than one answer field (`{}` and `{key}`)",
                            answer.unwrap().0
                        )));
                    }
                }
                let (field, value) =
                    answer.ok_or_else(|| A::Error::custom("gold object names no answer field"))?;
                let metric =
                    metric.ok_or_else(|| A::Error::custom("gold object is missing `metric`"))?;
                Ok(GoldSpec { field, value, metric })
            }
        }

        deserializer.deserialize_map(GoldVisitor)
    }
}

/// Error raised when an answer cannot be scored.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewardError {
    /// The scored field is absent from the final context.
    #[error("final context has no `{field}` field to score")]
    MissingAnswerField { field: String },
}

/// Lowercases, trims, and collapses whitespace runs to single spaces.
fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    let gold: Vec<&str> = gold.split_whitespace().collect();
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for token in &gold {
        *gold_counts.entry(token).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for token in &pred {
        if let Some(count) = gold_counts.get_mut(token) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scores the gold field of `final_context` and returns a value in `[0, 1]`.
pub fn compute_reward(final_context: &Context, gold: &GoldSpec) -> Result<f64, RewardError> {
    let answer = final_context
        .get(&gold.field)
        .ok_or_else(|| RewardError::MissingAnswerField {
            field: gold.field.clone(),
        })?;
    let answer = normalize(answer);
    let reference = normalize(&gold.value);
    Ok(match gold.metric {
        Metric::ExactMatch => {
            if answer == reference {
                1.0
            } else {
                0.0
            }
        }
        Metric::F1 => token_f1(&answer, &reference),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(answer: &str) -> Context {
        Context::from_pairs([("answer", answer)])
    }

    fn gold(value: &str, metric: Metric) -> GoldSpec {
        GoldSpec {
            field: "answer".into(),
            value: value.into(),
            metric,
        }
    }

    #[test]
    fn exact_match_normalizes_case_and_whitespace() {
        let g = gold("paris", Metric::ExactMatch);
        assert_eq!(compute_reward(&ctx("  Paris \n"), &g).unwrap(), 1.0);
        assert_eq!(compute_reward(&ctx("PARIS  FRANCE"), &g).unwrap(), 0.0);
        let g2 = gold("new  york   city", Metric::ExactMatch);
        assert_eq!(compute_reward(&ctx("New York City"), &g2).unwrap(), 1.0);
    }

    /// Hand-computed F1: prediction "the red car" vs gold "red car" has
    /// overlap 2, precision 2/3, recall 1, F1 = 2*(2/3)/(5/3) = 0.8.
    #[test]
    fn f1_matches_hand_computation() {
        let g = gold("red car", Metric::F1);
        let score = compute_reward(&ctx("the red car"), &g).unwrap();
        assert!((score - 0.8).abs() < 1e-12, "got {score}");
    }

    #[test]
    fn f1_empty_prediction_scores_zero() {
        let g = gold("x", Metric::F1);
        assert_eq!(compute_reward(&ctx(""), &g).unwrap(), 0.0);
        assert_eq!(compute_reward(&ctx("   "), &g).unwrap(), 0.0);
    }

    #[test]
    fn f1_counts_duplicates_as_multiset() {
        // prediction "a a b", gold "a b b": overlap = a + b = 2,
        // precision 2/3, recall 2/3, F1 = 2/3.
        let g = gold("a b b", Metric::F1);
        let score = compute_reward(&ctx("a a b"), &g).unwrap();
        assert!((score - 2.0 / 3.0).abs() < 1e-12, "got {score}");
    }

    #[test]
    fn missing_answer_field_is_an_error() {
        let g = gold("x", Metric::ExactMatch);
        let empty = Context::new();
        assert_eq!(
            compute_reward(&empty, &g).unwrap_err(),
            RewardError::MissingAnswerField {
                field: "answer".into()
            }
        );
    }

    #[test]
    fn gold_spec_serde_uses_field_plus_metric_shape() {
        let g = gold("Paris", Metric::ExactMatch);
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"answer":"Paris","metric":"exact_match"}"#);
        let back: GoldSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);

        assert!(serde_json::from_str::<GoldSpec>(r#"{"metric":"f1"}"#).is_err());
        assert!(serde_json::from_str::<GoldSpec>(r#"{"a":"1","b":"2","metric":"f1"}"#).is_err());
        assert!(serde_json::from_str::<GoldSpec>(r#"{"answer":"x","metric":"bleu"}"#).is_err());
    }

    proptest! {
        /// Rewards always land in [0, 1]; exact match is always 0 or 1.
        #[test]
        fn rewards_are_bounded(answer in ".{0,40}", reference in ".{0,40}") {
            for metric in [Metric::ExactMatch, Metric::F1] {
                let g = gold(&reference, metric);
                let score = compute_reward(&ctx(&answer), &g).unwrap();
                prop_assert!((0.0..=1.0).contains(&score));
                if metric == Metric::ExactMatch {
                    prop_assert!(score == 0.0 || score == 1.0);
                }
            }
        }

        /// F1 is symmetric in prediction and reference.
        #[test]
        fn f1_is_symmetric(a in "[a-c ]{0,16}", b in "[a-c ]{0,16}") {
            let ab = compute_reward(&ctx(&a), &gold(&b, Metric::F1)).unwrap();
            let ba = compute_reward(&ctx(&b), &gold(&a, Metric::F1)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
