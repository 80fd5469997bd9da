//! Three-part language instructions (layout / task / content) and the
//! deterministic bag-of-tokens prompt encoder that replaces a text encoder.

use crate::gridlayout::GridSpec;
use crate::taskgraph::{TaskSpec, IMAGE_NODE};
use serde::{Deserialize, Serialize};

/// Layout, task, and content instruction texts. The layout part is always
/// present; task and content may be omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PromptBundle {
    pub layout: String,
    pub task: Option<String>,
    pub content: Option<String>,
}

impl PromptBundle {
    fn joined_text(&self) -> String {
        let mut text = self.layout.clone();
        if let Some(t) = &self.task {
            text.push(' ');
            text.push_str(t);
        }
        if let Some(c) = &self.content {
            text.push(' ');
            text.push_str(c);
        }
        text
    }
}

/// Fixed-size conditioning vector for a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub values: Vec<f64>,
    pub source_hash: u64,
}

/// When the content instruction is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentPolicy {
    /// Omit when any condition is the image node (strong visual cue).
    OmitWhenImageVisible,
    Always,
    Never,
}

impl Default for ContentPolicy {
    fn default() -> Self {
        ContentPolicy::OmitWhenImageVisible
    }
}

/// "A grid of R rows and L columns; the last cell of the last row is the target."
pub fn layout_instruction(spec: &GridSpec) -> String {
    format!(
        "A grid of {} rows and {} columns; the last cell of the last row is the target.",
        spec.rows(),
        spec.images_per_row
    )
}

/// "Task: [cond, ...] to [target]." when included; None otherwise.
pub fn task_instruction(task: &TaskSpec, include_task: bool) -> Option<String> {
    if !include_task {
        return None;
    }
    Some(format!("Task: [{}] to [{}].", task.conditions.join(", "), task.target))
}

/// Content caption per policy: skipped when the conditions already carry the
/// image itself (strong visual cue).
pub fn content_instruction(task: &TaskSpec, caption: &str, policy: ContentPolicy) -> Option<String> {
    let include = match policy {
        ContentPolicy::Always => true,
        ContentPolicy::Never => false,
        ContentPolicy::OmitWhenImageVisible => !task.conditions.iter().any(|c| c == IMAGE_NODE),
    };
    include.then(|| caption.to_string())
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Bag-of-tokens hashing encoder: lowercase, split on non-alphanumerics,
/// each token contributes +-1 at an FNV-1a-derived index; unit L2 norm
/// unless the bundle is empty.
pub fn encode_prompt(bundle: &PromptBundle, d: usize) -> PromptEmbedding {
    assert!(d >= 8, "conditioning width must be >= 8");
    let text = bundle.joined_text();
    let mut values = vec![0.0f64; d];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(token.as_bytes());
        let idx = (h % d as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[idx] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v /= norm;
        }
    }
    PromptEmbedding { values, source_hash: fnv1a(text.as_bytes()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgraph::{build_default_graph, enumerate_tasks, GraphConfig};

    fn spec_for(c: usize, l: usize) -> GridSpec {
        GridSpec::new(c, l, 8, 8)
    }

    #[test]
    fn layout_template_is_exact() {
        assert_eq!(
            layout_instruction(&spec_for(2, 3)),
            "A grid of 3 rows and 3 columns; the last cell of the last row is the target."
        );
        assert_eq!(
            layout_instruction(&spec_for(0, 2)),
            "A grid of 1 rows and 2 columns; the last cell of the last row is the target."
        );
        assert_eq!(layout_instruction(&spec_for(1, 4)), layout_instruction(&spec_for(1, 4)));
    }

    #[test]
    fn task_template_lists_conditions_in_order() {
        let t = TaskSpec::new(vec![IMAGE_NODE.into()], "edge".into());
        assert_eq!(task_instruction(&t, true).unwrap(), "Task: [image] to [edge].");
        assert_eq!(task_instruction(&t, false), None);
        let t = TaskSpec::new(vec!["edge".into(), "grayscale".into()], IMAGE_NODE.into());
        assert_eq!(task_instruction(&t, true).unwrap(), "Task: [edge, grayscale] to [image].");
    }

    #[test]
    fn content_policy_omits_when_image_is_a_condition() {
        let fwd = TaskSpec::new(vec![IMAGE_NODE.into()], "edge".into());
        let rev = TaskSpec::new(vec!["edge".into()], IMAGE_NODE.into());
        let cap = "3 rectangles, 1 disc, blue background";
        assert_eq!(content_instruction(&fwd, cap, ContentPolicy::OmitWhenImageVisible), None);
        assert_eq!(
            content_instruction(&rev, cap, ContentPolicy::OmitWhenImageVisible).as_deref(),
            Some(cap)
        );
        assert!(content_instruction(&fwd, cap, ContentPolicy::Always).is_some());
        assert!(content_instruction(&rev, cap, ContentPolicy::Never).is_none());
    }

    #[test]
    fn empty_bundle_encodes_to_zero() {
        let e = encode_prompt(&PromptBundle::default(), 16);
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_text_identical_embedding() {
        let b = PromptBundle {
            layout: layout_instruction(&spec_for(1, 2)),
            task: Some("Task: [image] to [edge].".into()),
            content: None,
        };
        assert_eq!(encode_prompt(&b, 64), encode_prompt(&b, 64));
    }

    #[test]
    fn one_keyword_difference_lowers_cosine() {
        let mk = |kind: &str| PromptBundle {
            layout: layout_instruction(&spec_for(0, 2)),
            task: Some(format!("Task: [image] to [{kind}].")),
            content: None,
        };
        let a = encode_prompt(&mk("invert"), 64);
        let b = encode_prompt(&mk("grayscale"), 64);
        let cos: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0 - 1e-6, "cosine {cos}");
    }

    fn token_bag(text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let mut bag: Vec<String> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect();
        bag.sort();
        bag
    }

    // A bag-of-tokens encoder is order-invariant by construction, so two
    // templates collide exactly when their token bags match (e.g. permuted
    // condition lists). Injectivity is checked modulo bag equality.
    #[test]
    fn embeddings_are_injective_modulo_token_bags_on_default_templates() {
        let g = build_default_graph(&GraphConfig::default_desk()).unwrap();
        let tasks = enumerate_tasks(&g, 3).unwrap();
        let mut seen: Vec<(Vec<String>, Vec<f64>, String)> = Vec::new();
        for c in [0usize, 2] {
            for task in &tasks {
                let bundle = PromptBundle {
                    layout: layout_instruction(&spec_for(c, task.len())),
                    task: task_instruction(task, true),
                    content: None,
                };
                let e = encode_prompt(&bundle, 128);
                let norm: f64 = e.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
                seen.push((token_bag(&bundle.joined_text()), e.values, format!("{c}:{}", task.task_id)));
            }
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                let same_bag = seen[i].0 == seen[j].0;
                let same_emb = seen[i].1 == seen[j].1;
                assert_eq!(
                    same_bag, same_emb,
                    "{} vs {}: bag_eq={same_bag} emb_eq={same_emb}",
                    seen[i].2, seen[j].2
                );
            }
        }
    }
}
