//! Decision-weighted knowledge graph.
//!
//! Built in three phases: entity-relation extraction (G0), embedding
//! validation of each triple against its source chunks (G1), and action
//! reinforcement from labelled samples plus variable-node injection (G2).
//! A post-processing pass cleans noise nodes and caps the final weights.

mod extract;
mod phases;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::providers::{EntityCategory, ProviderError};

pub use extract::{extract_phase1, extract_triples, lemma, Phase1Report, RawTriple};
pub use phases::{
    link_samples, postprocess, reinforce_phase3, validate_phase2, LinkedSample, NoiseReason,
    Phase2Report, Phase3Report, PostReport, RemovedEdge,
};

pub const GRAPH_VERSION: u32 = 1;
pub const REQUIRES: &str = "requires";
pub const VAR_PREFIX: &str = "?var_";
pub const DEFAULT_MAX_HOPS: usize = 4;

#[derive(Debug, Error)]
pub enum KgError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("graph file failed its digest check: {0}")]
    Integrity(String),
    #[error("graph file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgParams {
    /// Weight of the semantic component; `1 - alpha` goes to the action one.
    pub alpha: f64,
    pub sem_svo: f64,
    pub sem_prep: f64,
    pub tau_phase2: f64,
    pub freq_bonus: f64,
    pub act_init: f64,
    pub delta_answer: f64,
    pub delta_ask: f64,
    pub delta_abstain: f64,
    pub requires_weight: f64,
    pub reanchor_threshold: f64,
    pub weight_cap: f64,
    pub hub_factor: f64,
    /// Longest token gap between two entities still read as one triple.
    pub max_gap_tokens: usize,
    /// Bound on KB-linked nodes considered for HotpotQA path reinforcement.
    pub max_path_nodes: usize,
}

impl Default for KgParams {
    fn default() -> Self {
        KgParams {
            alpha: 0.5,
            sem_svo: 0.8,
            sem_prep: 0.7,
            tau_phase2: 0.50,
            freq_bonus: 0.03,
            act_init: 0.5,
            delta_answer: 0.20,
            delta_ask: 0.05,
            delta_abstain: -0.10,
            requires_weight: 0.9,
            reanchor_threshold: 0.30,
            weight_cap: 0.95,
            hub_factor: 3.0,
            max_gap_tokens: 6,
            max_path_nodes: 24,
        }
    }
}

impl KgParams {
    /// Edge weight before the final cap: `alpha * sem + (1 - alpha) * act`,
    /// with act clamped to `[0, 1]`.
    pub fn blend(&self, sem: f64, act: f64) -> f64 {
        self.alpha * sem + (1.0 - self.alpha) * act.clamp(0.0, 1.0)
    }

    pub fn final_weight(&self, sem: f64, act: f64) -> f64 {
        self.blend(sem, act).min(self.weight_cap)
    }

    pub fn delta(&self, action: crate::state::Action) -> f64 {
        match action {
            crate::state::Action::Answer => self.delta_answer,
            crate::state::Action::Ask => self.delta_ask,
            crate::state::Action::Abstain => self.delta_abstain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entity,
    Variable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgNode {
    pub node_id: String,
    pub name: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub category: Option<EntityCategory>,
    #[serde(default)]
    pub anchor_node: Option<String>,
    #[serde(default)]
    pub origin_sample_id: Option<String>,
    #[serde(default)]
    pub origin_query: Option<String>,
    /// For variable nodes: the missing entity or variable they stand for.
    #[serde(default)]
    pub label: Option<String>,
}

impl KgNode {
    pub fn entity(name: &str, category: EntityCategory) -> Self {
        KgNode {
            node_id: name.to_string(),
            name: name.to_string(),
            kind: NodeKind::Entity,
            category: Some(category),
            anchor_node: None,
            origin_sample_id: None,
            origin_query: None,
            label: None,
        }
    }

    pub fn is_variable(&self) -> bool {
        self.kind == NodeKind::Variable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEdge {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub sem: f64,
    /// Raw accumulated action signal; clamped only when weights are formed.
    pub act: f64,
    pub weight: f64,
    pub freq: u32,
    pub source_chunks: BTreeSet<String>,
}

impl KgEdge {
    pub fn is_requires(&self) -> bool {
        self.relation == REQUIRES
    }

    pub fn key(&self) -> String {
        format!("{} | {} | {}", self.subject, self.relation, self.object)
    }

    pub fn touches(&self, node: &str) -> bool {
        self.subject == node || self.object == node
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub phase: String,
    pub node_count: usize,
    pub edge_count: usize,
    pub avg_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    pub nodes: BTreeMap<String, KgNode>,
    pub edges: Vec<KgEdge>,
    pub kb_to_nodes: BTreeMap<String, BTreeSet<String>>,
    pub node_to_kbs: BTreeMap<String, BTreeSet<String>>,
    pub phase_stats: Vec<PhaseStats>,
}

impl KnowledgeGraph {
    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    pub fn entity_nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Entity)
    }

    pub fn variable_nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Variable)
    }

    pub fn edge_position(&self, subject: &str, relation: &str, object: &str) -> Option<usize> {
        self.edges
            .iter()
            .position(|e| e.subject == subject && e.relation == relation && e.object == object)
    }

    pub fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut d: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for e in &self.edges {
            *d.entry(e.subject.as_str()).or_default() += 1;
            *d.entry(e.object.as_str()).or_default() += 1;
        }
        d
    }

    /// Undirected adjacency: node -> [(neighbour, edge index)], neighbours in
    /// sorted order.
    pub fn adjacency(&self, include_requires: bool) -> BTreeMap<&str, Vec<(&str, usize)>> {
        let mut adj: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        for (i, e) in self.edges.iter().enumerate() {
            if !include_requires && e.is_requires() {
                continue;
            }
            adj.entry(e.subject.as_str())
                .or_default()
                .push((e.object.as_str(), i));
            adj.entry(e.object.as_str())
                .or_default()
                .push((e.subject.as_str(), i));
        }
        for v in adj.values_mut() {
            v.sort();
        }
        adj
    }

    /// Removes nodes with no incident edge. Returns how many went.
    pub fn prune_isolated(&mut self) -> usize {
        let mut linked: BTreeSet<&str> = BTreeSet::new();
        for e in &self.edges {
            linked.insert(&e.subject);
            linked.insert(&e.object);
        }
        let dead: Vec<String> = self
            .nodes
            .keys()
            .filter(|k| !linked.contains(k.as_str()))
            .cloned()
            .collect();
        for k in &dead {
            self.nodes.remove(k);
        }
        self.rebuild_indices();
        dead.len()
    }

    /// Removes a node and all of its edges.
    pub fn remove_node(&mut self, id: &str) {
        self.nodes.remove(id);
        self.edges.retain(|e| !e.touches(id));
    }

    /// Drops index entries for missing nodes and recomputes `kb_to_nodes` as
    /// the exact inverse of `node_to_kbs`.
    pub fn rebuild_indices(&mut self) {
        self.node_to_kbs
            .retain(|n, kbs| self.nodes.contains_key(n) && !kbs.is_empty());
        self.kb_to_nodes.clear();
        for (n, kbs) in &self.node_to_kbs {
            for kb in kbs {
                self.kb_to_nodes
                    .entry(kb.clone())
                    .or_default()
                    .insert(n.clone());
            }
        }
    }

    pub fn nodes_for_chunks<'a, I: IntoIterator<Item = &'a String>>(
        &self,
        chunks: I,
    ) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in chunks {
            if let Some(ns) = self.kb_to_nodes.get(c) {
                out.extend(ns.iter().cloned());
            }
        }
        out
    }

    pub fn stats(&self, phase: &str) -> PhaseStats {
        let avg = if self.edges.is_empty() {
            0.0
        } else {
            self.edges.iter().map(|e| e.weight).sum::<f64>() / self.edges.len() as f64
        };
        PhaseStats {
            phase: phase.to_string(),
            node_count: self.nodes.len(),
            edge_count: self.edges.len(),
            avg_weight: avg,
        }
    }

    pub fn record_stats(&mut self, phase: &str) {
        let s = self.stats(phase);
        self.phase_stats.retain(|p| p.phase != phase);
        self.phase_stats.push(s);
    }

    /// Unweighted shortest path by BFS over non-`requires` edges. Neighbours
    /// are visited in sorted order, so among equal-length paths the
    /// lexicographically smallest node sequence wins.
    pub fn shortest_path(&self, from: &str, to: &str) -> Option<Vec<usize>> {
        if from == to {
            return Some(Vec::new());
        }
        let adj = self.adjacency(false);
        let mut prev: HashMap<&str, (&str, usize)> = HashMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(n) = queue.pop_front() {
            for &(m, e) in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(m) {
                    prev.insert(m, (n, e));
                    if m == to {
                        let mut path = Vec::new();
                        let mut cur = to;
                        while cur != from {
                            let (p, e) = prev[cur];
                            path.push(e);
                            cur = p;
                        }
                        path.reverse();
                        return Some(path);
                    }
                    queue.push_back(m);
                }
            }
        }
        None
    }

    /// Nodes within `hops` undirected steps of any seed (seeds included).
    pub fn ego(&self, seeds: &[String], hops: usize, include_requires: bool) -> BTreeSet<String> {
        let adj = self.adjacency(include_requires);
        let mut seen: BTreeSet<String> = seeds
            .iter()
            .filter(|s| self.nodes.contains_key(*s))
            .cloned()
            .collect();
        let mut frontier: Vec<String> = seen.iter().cloned().collect();
        for _ in 0..hops {
            let mut next = Vec::new();
            for n in &frontier {
                for &(m, _) in adj.get(n.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                    if seen.insert(m.to_string()) {
                        next.push(m.to_string());
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        let file = GraphFile::from_graph(self);
        let bytes = serde_json::to_vec_pretty(&file).expect("graph serializes");
        std::fs::write(path, bytes).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, KgError> {
        let bytes = std::fs::read(path).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, KgError> {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| KgError::Integrity(format!("unreadable graph file: {e}")))?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != GRAPH_VERSION {
            return Err(KgError::Version {
                found,
                expected: GRAPH_VERSION,
            });
        }
        let file: GraphFile = serde_json::from_value(value)
            .map_err(|e| KgError::Integrity(format!("malformed graph file: {e}")))?;
        let expected = file.compute_digest();
        if file.content_digest != expected {
            return Err(KgError::Integrity(format!(
                "content digest {} != {}",
                file.content_digest, expected
            )));
        }
        Ok(file.into_graph())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GraphFile::from_graph(self)).expect("graph serializes")
    }

    /// Builds a graph from hand-written `subject<TAB>relation<TAB>object<TAB>weight`
    /// lines. Blank lines and `#` comments are skipped. Names starting with
    /// `?var_` become variable nodes; every other name an entity node.
    pub fn from_tsv(content: &str) -> Result<Self, KgError> {
        let mut g = KnowledgeGraph::default();
        for (n, line) in content.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let bad = |m: &str| KgError::Integrity(format!("line {}: {m}", n + 1));
            let [s, r, o, w] = cols[..] else {
                return Err(bad("expected 4 tab-separated columns"));
            };
            let weight: f64 = w.parse().map_err(|_| bad("weight is not a number"))?;
            if s.is_empty() || r.is_empty() || o.is_empty() || !(0.0..=1.0).contains(&weight) {
                return Err(bad("empty name or weight outside [0, 1]"));
            }
            for name in [s, o] {
                g.nodes.entry(name.to_string()).or_insert_with(|| {
                    let mut node = KgNode::entity(name, EntityCategory::Concept);
                    if name.starts_with(VAR_PREFIX) {
                        node.kind = NodeKind::Variable;
                        node.category = None;
                    }
                    node
                });
            }
            if r == REQUIRES {
                if let Some(var) = g.nodes.get_mut(o) {
                    var.anchor_node = Some(s.to_string());
                }
            }
            g.edges.push(KgEdge {
                subject: s.to_string(),
                relation: r.to_string(),
                object: o.to_string(),
                sem: weight,
                act: weight,
                weight,
                freq: 1,
                source_chunks: BTreeSet::new(),
            });
        }
        g.record_stats("import");
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    version: u32,
    nodes: Vec<KgNode>,
    edges: Vec<KgEdge>,
    kb_to_nodes: BTreeMap<String, BTreeSet<String>>,
    node_to_kbs: BTreeMap<String, BTreeSet<String>>,
    phase_stats: Vec<PhaseStats>,
    content_digest: String,
}

impl GraphFile {
    fn from_graph(g: &KnowledgeGraph) -> Self {
        let mut f = GraphFile {
            version: GRAPH_VERSION,
            nodes: g.nodes.values().cloned().collect(),
            edges: g.edges.clone(),
            kb_to_nodes: g.kb_to_nodes.clone(),
            node_to_kbs: g.node_to_kbs.clone(),
            phase_stats: g.phase_stats.clone(),
            content_digest: String::new(),
        };
        f.content_digest = f.compute_digest();
        f
    }

    fn compute_digest(&self) -> String {
        let mut unsigned = self.clone();
        unsigned.content_digest.clear();
        hex::encode(Sha256::digest(
            serde_json::to_vec(&unsigned).expect("graph serializes"),
        ))
    }

    fn into_graph(self) -> KnowledgeGraph {
        KnowledgeGraph {
            nodes: self
                .nodes
                .into_iter()
                .map(|n| (n.node_id.clone(), n))
                .collect(),
            edges: self.edges,
            kb_to_nodes: self.kb_to_nodes,
            node_to_kbs: self.node_to_kbs,
            phase_stats: self.phase_stats,
        }
    }
}

/// Best product of edge weights over simple undirected paths of at most
/// `max_hops` edges; 0 when no such path exists, 1 for `start == goal`.
pub fn path_score(
    graph: &KnowledgeGraph,
    start: &str,
    goal: &str,
    max_hops: usize,
) -> Result<f64, KgError> {
    for n in [start, goal] {
        if !graph.nodes.contains_key(n) {
            return Err(KgError::UnknownNode(n.to_string()));
        }
    }
    if start == goal {
        return Ok(1.0);
    }
    let adj = graph.adjacency(true);
    let mut best = 0.0f64;
    let mut on_path = BTreeSet::from([start]);
    #[allow(clippy::too_many_arguments)]
    fn dfs<'a>(
        g: &KnowledgeGraph,
        adj: &BTreeMap<&'a str, Vec<(&'a str, usize)>>,
        node: &'a str,
        goal: &str,
        hops_left: usize,
        acc: f64,
        on_path: &mut BTreeSet<&'a str>,
        best: &mut f64,
    ) {
        if hops_left == 0 || acc <= *best {
            return;
        }
        for &(m, e) in adj.get(node).map(Vec::as_slice).unwrap_or(&[]) {
            let w = acc * g.edges[e].weight;
            if m == goal {
                *best = best.max(w);
            } else if !on_path.contains(m) {
                on_path.insert(m);
                dfs(g, adj, m, goal, hops_left - 1, w, on_path, best);
                on_path.remove(m);
            }
        }
    }
    dfs(
        graph,
        &adj,
        start,
        goal,
        max_hops,
        1.0,
        &mut on_path,
        &mut best,
    );
    Ok(best)
}
