//! Annotation graph and task sampling.
//!
//! Images are central nodes; each annotation kind is a leaf joined to the
//! image by a bidirectional edge, so the graph is strongly connected and a
//! generation task is an ordered selection of distinct nodes containing the
//! image node: all but the last act as conditions, the last is the target.

use crate::error::{ClozeError, Result};
use crate::rng::SeededRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub const IMAGE_NODE: &str = "image";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeFamily {
    Image,
    SpatialCondition,
    Degradation,
    Edit,
    Style,
}

/// A node type: annotation kind or the central image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeKind {
    pub id: String,
    pub family: NodeFamily,
    /// Whether the node is computable from the image by a deterministic
    /// forward transform (so it can serve as a ground-truth target).
    pub forward: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub annotations: Vec<NodeKind>,
    #[serde(default)]
    pub extra_edges: Vec<(String, String)>,
}

impl GraphConfig {
    /// The 12-condition default graph over the built-in transform registry.
    pub fn default_desk() -> Self {
        let ann = |id: &str, family: NodeFamily| NodeKind { id: id.to_string(), family, forward: true };
        GraphConfig {
            annotations: vec![
                ann("edge", NodeFamily::SpatialCondition),
                ann("binary_mask", NodeFamily::SpatialCondition),
                ann("stripes", NodeFamily::SpatialCondition),
                ann("posterize", NodeFamily::SpatialCondition),
                ann("grayscale", NodeFamily::Style),
                ann("invert", NodeFamily::Edit),
                ann("channel_swap", NodeFamily::Edit),
                ann("vflip", NodeFamily::Edit),
                ann("blur", NodeFamily::Degradation),
                ann("brighten", NodeFamily::Degradation),
                ann("downscale", NodeFamily::Degradation),
                ann("quantize2", NodeFamily::Degradation),
            ],
            extra_edges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskGraph {
    pub nodes: Vec<NodeKind>,
    /// Unordered node-id pairs, stored with ids sorted within each pair.
    pub edges: BTreeSet<(String, String)>,
}

/// A sampled generation task: ordered conditions plus a target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub conditions: Vec<String>,
    pub target: String,
    pub task_id: String,
}

impl TaskSpec {
    pub fn new(conditions: Vec<String>, target: String) -> Self {
        let task_id = format!("{}->{}", conditions.join("+"), target);
        TaskSpec { conditions, target, task_id }
    }

    /// Number of images involved (conditions plus target).
    pub fn len(&self) -> usize {
        self.conditions.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub strongly_connected: bool,
    pub image_node_count: usize,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn edge_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Star topology: image center, one edge per annotation, plus config extras.
pub fn build_default_graph(config: &GraphConfig) -> Result<TaskGraph> {
    if config.annotations.len() < 2 {
        return Err(ClozeError::GraphConfig(format!(
            "need at least 2 annotation kinds, got {}",
            config.annotations.len()
        )));
    }
    let mut nodes = vec![NodeKind {
        id: IMAGE_NODE.to_string(),
        family: NodeFamily::Image,
        forward: false,
    }];
    let mut seen = BTreeSet::new();
    seen.insert(IMAGE_NODE.to_string());
    for ann in &config.annotations {
        if !seen.insert(ann.id.clone()) {
            return Err(ClozeError::GraphConfig(format!("duplicate node id `{}`", ann.id)));
        }
        if ann.family == NodeFamily::Image {
            return Err(ClozeError::GraphConfig(format!(
                "annotation `{}` may not use the image family",
                ann.id
            )));
        }
        nodes.push(ann.clone());
    }
    let mut edges = BTreeSet::new();
    for ann in &config.annotations {
        edges.insert(edge_key(IMAGE_NODE, &ann.id));
    }
    for (a, b) in &config.extra_edges {
        if !seen.contains(a) || !seen.contains(b) {
            return Err(ClozeError::GraphConfig(format!("extra edge ({a},{b}) references unknown node")));
        }
        if a != b {
            edges.insert(edge_key(a, b));
        }
    }
    let g = TaskGraph { nodes, edges };
    let report = validate_graph(&g);
    if !report.passed() {
        return Err(ClozeError::GraphConfig(report.failures.join("; ")));
    }
    Ok(g)
}

/// Checks strong connectivity (edges read bidirectionally) and image-node
/// uniqueness. Failures are reported, not raised.
pub fn validate_graph(g: &TaskGraph) -> ValidationReport {
    let mut failures = Vec::new();
    let image_node_count = g.nodes.iter().filter(|n| n.family == NodeFamily::Image).count();
    if image_node_count != 1 {
        failures.push(format!("expected exactly one image node, found {image_node_count}"));
    }

    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in &g.nodes {
        adj.entry(&n.id).or_default();
    }
    for (a, b) in &g.edges {
        adj.entry(a.as_str()).or_default().push(b.as_str());
        adj.entry(b.as_str()).or_default().push(a.as_str());
    }
    let strongly_connected = if g.nodes.is_empty() {
        false
    } else {
        let start = g.nodes[0].id.as_str();
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(u) = queue.pop_front() {
            for &v in adj.get(u).into_iter().flatten() {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen.len() == g.nodes.len()
    };
    if !strongly_connected {
        failures.push("graph is not strongly connected".to_string());
    }
    ValidationReport { strongly_connected, image_node_count, failures }
}

impl TaskGraph {
    pub fn node(&self, id: &str) -> Option<&NodeKind> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn valid_target(&self, id: &str) -> bool {
        match self.node(id) {
            Some(n) => n.family == NodeFamily::Image || n.forward,
            None => false,
        }
    }
}

/// All valid task specs with 2..=max_len nodes, deterministically sorted.
///
/// A spec is an ordered selection of distinct nodes containing the image
/// node; the final node is the target and must be the image or a
/// forward-computable kind.
pub fn enumerate_tasks(g: &TaskGraph, max_len: usize) -> Result<Vec<TaskSpec>> {
    if !(2..=4).contains(&max_len) {
        return Err(ClozeError::InvalidTask(format!("max_len {max_len} outside [2,4]")));
    }
    let ids: Vec<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut out = Vec::new();
    let mut seq: Vec<&str> = Vec::new();

    fn recurse<'a>(
        g: &TaskGraph,
        ids: &[&'a str],
        seq: &mut Vec<&'a str>,
        max_len: usize,
        out: &mut Vec<TaskSpec>,
    ) {
        if seq.len() >= 2 {
            let target = *seq.last().unwrap();
            let has_image = seq.iter().any(|&s| s == IMAGE_NODE);
            if has_image && g.valid_target(target) {
                let conds = seq[..seq.len() - 1].iter().map(|s| s.to_string()).collect();
                out.push(TaskSpec::new(conds, target.to_string()));
            }
        }
        if seq.len() == max_len {
            return;
        }
        for &id in ids {
            if !seq.contains(&id) {
                seq.push(id);
                recurse(g, ids, seq, max_len, out);
                seq.pop();
            }
        }
    }

    recurse(g, &ids, &mut seq, max_len, &mut out);
    out.sort_by(|a, b| (a.len(), &a.conditions, &a.target).cmp(&(b.len(), &b.conditions, &b.target)));
    out.dedup();
    Ok(out)
}

/// Uniform draw from the enumerated tasks restricted to `len_range`.
pub fn sample_task(g: &TaskGraph, rng: &mut SeededRng, len_range: (usize, usize)) -> Result<TaskSpec> {
    let all = enumerate_tasks(g, len_range.1)?;
    let pool: Vec<TaskSpec> = all.into_iter().filter(|t| t.len() >= len_range.0).collect();
    if pool.is_empty() {
        return Err(ClozeError::NoValidTask(format!("len range {len_range:?}")));
    }
    let idx = rng.gen_range(0..pool.len());
    Ok(pool[idx].clone())
}
