use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{KgEdge, KgError, KgNode, KgParams, KnowledgeGraph, NodeKind, REQUIRES, VAR_PREFIX};
use crate::providers::{cosine, is_valid_entity, Embedder, Embedding, NerProvider};
use crate::retrieval::Chunk;
use crate::sample::{Source, UnifiedSample};
use crate::state::Action;
use crate::text::normalize_variable;

const BATCH: usize = 64;

fn embed_all(embedder: &dyn Embedder, texts: &[String]) -> Vec<Option<Embedding>> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(BATCH) {
        let refs: Vec<&str> = batch.iter().map(String::as_str).collect();
        match embedder.embed(&refs) {
            Ok(v) => out.extend(v.into_iter().map(Some)),
            Err(e) => {
                log::warn!("embedding batch failed: {e}");
                out.extend(std::iter::repeat_n(None, batch.len()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedEdge {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub sem: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Phase2Report {
    pub removed: Vec<RemovedEdge>,
    /// Edges kept with their previous sem because embedding failed.
    pub stale: usize,
    pub isolated_pruned: usize,
}

/// Builds G1: re-scores each triple by its best cosine similarity to a
/// source chunk plus a corroboration bonus `ln(1 + freq) * freq_bonus`, and
/// drops edges scoring below `tau_phase2`.
pub fn validate_phase2(
    g0: &KnowledgeGraph,
    chunks: &[Chunk],
    embedder: &dyn Embedder,
    params: &KgParams,
) -> (KnowledgeGraph, Phase2Report) {
    let mut g = g0.clone();
    let mut report = Phase2Report::default();
    let chunk_text: BTreeMap<&str, &str> = chunks
        .iter()
        .map(|c| (c.chunk_id.as_str(), c.text.as_str()))
        .collect();

    let needed: Vec<String> = g
        .edges
        .iter()
        .flat_map(|e| e.source_chunks.iter())
        .filter(|c| chunk_text.contains_key(c.as_str()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let chunk_vecs: BTreeMap<&str, Embedding> = needed
        .iter()
        .zip(embed_all(
            embedder,
            &needed
                .iter()
                .map(|c| chunk_text[c.as_str()].to_string())
                .collect::<Vec<_>>(),
        ))
        .filter_map(|(id, v)| v.map(|v| (id.as_str(), v)))
        .collect();
    let triple_texts: Vec<String> = g
        .edges
        .iter()
        .map(|e| format!("{} {} {}", e.subject, e.relation, e.object))
        .collect();
    let triple_vecs = embed_all(embedder, &triple_texts);

    let mut kept = Vec::with_capacity(g.edges.len());
    for (mut e, tv) in std::mem::take(&mut g.edges).into_iter().zip(triple_vecs) {
        let best = tv.and_then(|tv| {
            e.source_chunks
                .iter()
                .filter_map(|c| chunk_vecs.get(c.as_str()))
                .map(|cv| cosine(&tv, cv))
                .reduce(f64::max)
        });
        let Some(best) = best else {
            report.stale += 1;
            kept.push(e);
            continue;
        };
        let sem = (best + (1.0 + e.freq as f64).ln() * params.freq_bonus).clamp(0.0, 1.0);
        if sem < params.tau_phase2 {
            report.removed.push(RemovedEdge {
                subject: e.subject,
                relation: e.relation,
                object: e.object,
                sem,
            });
            continue;
        }
        e.sem = sem;
        e.weight = params.blend(e.sem, e.act);
        kept.push(e);
    }
    g.edges = kept;
    report.isolated_pruned = g.prune_isolated();
    g.record_stats("G1");
    (g, report)
}

/// A labelled sample with the chunk ids it draws evidence from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedSample {
    pub id: String,
    pub query: String,
    pub action: Action,
    pub source: Source,
    pub chunk_ids: Vec<String>,
}

/// Links each sample to the chunks cut from its context documents.
pub fn link_samples(samples: &[UnifiedSample], chunks: &[Chunk]) -> Vec<LinkedSample> {
    let mut by_doc: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in chunks {
        by_doc
            .entry(c.doc_id.as_str())
            .or_default()
            .push(c.chunk_id.as_str());
    }
    samples
        .iter()
        .map(|s| {
            let mut ids: Vec<String> = s
                .context
                .documents
                .iter()
                .flat_map(|d| by_doc.get(d.doc_id.as_str()).into_iter().flatten())
                .map(|c| c.to_string())
                .collect();
            ids.sort();
            ids.dedup();
            LinkedSample {
                id: s.id.clone(),
                query: s.query.clone(),
                action: s.action,
                source: s.metadata.source,
                chunk_ids: ids,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Phase3Report {
    /// Edge key -> touches per action in ANSWER, ASK, ABSTAIN order.
    pub touches: BTreeMap<String, [u32; 3]>,
    pub skipped_unknown_chunks: usize,
    pub variables_injected: usize,
    pub injection_without_anchor: usize,
    pub ner_failures: usize,
}

/// Builds G2 from G1.
///
/// Each sample adds its action delta once to every non-`requires` edge it
/// touches: edges sourced from its chunks, and for HotpotQA also the edges
/// on shortest paths between its KB-linked nodes. ASK samples attach a
/// variable node for each query entity missing from the graph, hung off the
/// linked node whose name is most similar to the query.
pub fn reinforce_phase3(
    g1: &KnowledgeGraph,
    samples: &[LinkedSample],
    ner: &dyn NerProvider,
    embedder: &dyn Embedder,
    params: &KgParams,
) -> Result<(KnowledgeGraph, Phase3Report), KgError> {
    let mut g = g1.clone();
    let mut report = Phase3Report::default();
    let mut order: Vec<&LinkedSample> = samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    for s in order {
        let linked: Vec<String> = s
            .chunk_ids
            .iter()
            .filter(|c| g.kb_to_nodes.contains_key(*c))
            .cloned()
            .collect();
        if linked.is_empty() {
            report.skipped_unknown_chunks += 1;
            continue;
        }
        let linked_set: BTreeSet<&String> = linked.iter().collect();
        let mut touched: BTreeSet<usize> = g
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                !e.is_requires() && e.source_chunks.iter().any(|c| linked_set.contains(c))
            })
            .map(|(i, _)| i)
            .collect();
        if s.source == Source::HotpotQa {
            let nodes: Vec<String> = g
                .nodes_for_chunks(linked.iter())
                .into_iter()
                .filter(|n| g.nodes.get(n).is_some_and(|n| n.kind == NodeKind::Entity))
                .take(params.max_path_nodes)
                .collect();
            for i in 0..nodes.len() {
                for j in i + 1..nodes.len() {
                    if let Some(path) = g.shortest_path(&nodes[i], &nodes[j]) {
                        touched.extend(path);
                    }
                }
            }
        }
        let delta = params.delta(s.action);
        for &i in &touched {
            let e = &mut g.edges[i];
            e.act += delta;
            report.touches.entry(e.key()).or_insert([0; 3])[s.action.index()] += 1;
        }
        if s.action == Action::Ask {
            inject_variables(&mut g, s, &linked, ner, embedder, params, &mut report)?;
        }
    }
    for e in &mut g.edges {
        e.weight = if e.is_requires() {
            params.requires_weight
        } else {
            params.blend(e.sem, e.act)
        };
    }
    g.rebuild_indices();
    g.record_stats("G2");
    Ok((g, report))
}

fn best_match(
    embedder: &dyn Embedder,
    query: &str,
    candidates: &[String],
) -> Result<Option<(String, f64)>, KgError> {
    if candidates.is_empty() {
        return Ok(None);
    }
    let q = embedder.embed_one(query)?;
    let refs: Vec<&str> = candidates.iter().map(String::as_str).collect();
    let vecs = embedder.embed(&refs)?;
    let mut best: Option<(String, f64)> = None;
    for (c, v) in candidates.iter().zip(vecs) {
        let sim = cosine(&q, &v);
        if best.as_ref().is_none_or(|(_, b)| sim > *b) {
            best = Some((c.clone(), sim));
        }
    }
    Ok(best)
}

fn inject_variables(
    g: &mut KnowledgeGraph,
    s: &LinkedSample,
    linked: &[String],
    ner: &dyn NerProvider,
    embedder: &dyn Embedder,
    params: &KgParams,
    report: &mut Phase3Report,
) -> Result<(), KgError> {
    let ents = match ner.ner(&s.query) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("NER failed on query of {}: {e}", s.id);
            report.ner_failures += 1;
            return Ok(());
        }
    };
    let mut absent: Vec<String> = Vec::new();
    for e in ents {
        let n = e.normalized();
        if !g.nodes.contains_key(&n) && !absent.contains(&n) {
            absent.push(n);
        }
    }
    if absent.is_empty() {
        return Ok(());
    }
    let candidates: Vec<String> = g
        .nodes_for_chunks(linked.iter())
        .into_iter()
        .filter(|n| g.nodes.get(n).is_some_and(|n| n.kind == NodeKind::Entity))
        .collect();
    let Some((anchor, _)) = best_match(embedder, &s.query, &candidates)? else {
        report.injection_without_anchor += absent.len();
        return Ok(());
    };
    let many = absent.len() > 1;
    for (i, label) in absent.into_iter().enumerate() {
        let mut id = if many {
            format!("{VAR_PREFIX}{}_{}", s.id, i + 1)
        } else {
            format!("{VAR_PREFIX}{}", s.id)
        };
        let mut bump = 1;
        while g.nodes.contains_key(&id) {
            bump += 1;
            id = format!("{VAR_PREFIX}{}_{}_{bump}", s.id, i + 1);
        }
        g.nodes.insert(
            id.clone(),
            KgNode {
                node_id: id.clone(),
                name: id.clone(),
                kind: NodeKind::Variable,
                category: None,
                anchor_node: Some(anchor.clone()),
                origin_sample_id: Some(s.id.clone()),
                origin_query: Some(s.query.clone()),
                label: Some(label),
            },
        );
        g.node_to_kbs
            .insert(id.clone(), linked.iter().cloned().collect());
        g.edges.push(requires_edge(
            &anchor,
            &id,
            linked.iter().cloned().collect(),
            params,
        ));
        report.variables_injected += 1;
    }
    Ok(())
}

fn requires_edge(anchor: &str, var: &str, chunks: BTreeSet<String>, params: &KgParams) -> KgEdge {
    KgEdge {
        subject: anchor.to_string(),
        relation: REQUIRES.to_string(),
        object: var.to_string(),
        sem: params.requires_weight,
        act: params.requires_weight,
        weight: params.requires_weight,
        freq: chunks.len().max(1) as u32,
        source_chunks: chunks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReason {
    UnrecognizedHub,
    ShortToken,
    ArticlePrefixed,
    MixedAlphanumeric,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostReport {
    pub noise_removed: Vec<(String, NoiseReason)>,
    pub reanchored: Vec<(String, String)>,
    pub variables_deleted: Vec<String>,
    pub isolated_pruned: usize,
    pub ner_failures: usize,
}

fn noise_reason(
    name: &str,
    recognized: bool,
    degree: usize,
    mean_degree: f64,
    params: &KgParams,
) -> Option<NoiseReason> {
    if !is_valid_entity(name) {
        return Some(NoiseReason::ShortToken);
    }
    if recognized {
        return None;
    }
    if name.starts_with("the ") {
        return Some(NoiseReason::ArticlePrefixed);
    }
    let mixed = name
        .split_whitespace()
        .any(|t| t.chars().any(|c| c.is_alphabetic()) && t.chars().any(|c| c.is_ascii_digit()));
    if mixed {
        return Some(NoiseReason::MixedAlphanumeric);
    }
    if degree as f64 > params.hub_factor * mean_degree {
        return Some(NoiseReason::UnrecognizedHub);
    }
    None
}

/// Final clean-up: removes noise entity nodes, re-anchors or deletes
/// orphaned variable nodes, prunes isolated nodes, and caps every weight.
pub fn postprocess(
    g2: &KnowledgeGraph,
    ner: &dyn NerProvider,
    embedder: &dyn Embedder,
    params: &KgParams,
) -> Result<(KnowledgeGraph, PostReport), KgError> {
    let mut g = g2.clone();
    let mut report = PostReport::default();

    let degrees: BTreeMap<String, usize> = g
        .degrees()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let entity_ids: Vec<String> = g.entity_nodes().map(|n| n.node_id.clone()).collect();
    let mean_degree = if entity_ids.is_empty() {
        0.0
    } else {
        entity_ids.iter().map(|n| degrees[n] as f64).sum::<f64>() / entity_ids.len() as f64
    };
    for id in &entity_ids {
        let name = &g.nodes[id].name;
        let recognized = match ner.ner(name) {
            Ok(ents) => ents.iter().any(|e| normalize_variable(&e.text) == *name),
            Err(e) => {
                log::warn!("re-validation NER failed for {name:?}: {e}");
                report.ner_failures += 1;
                true
            }
        };
        if let Some(reason) = noise_reason(name, recognized, degrees[id], mean_degree, params) {
            report.noise_removed.push((id.clone(), reason));
        }
    }
    for (id, _) in &report.noise_removed {
        g.remove_node(id);
    }

    let orphaned: Vec<String> = g
        .variable_nodes()
        .filter(|v| {
            let anchored = v
                .anchor_node
                .as_ref()
                .is_some_and(|a| g.nodes.contains_key(a));
            let has_edge = g
                .edges
                .iter()
                .any(|e| e.is_requires() && e.object == v.node_id);
            !(anchored && has_edge)
        })
        .map(|v| v.node_id.clone())
        .collect();
    if !orphaned.is_empty() {
        let candidates: Vec<String> = g.entity_nodes().map(|n| n.node_id.clone()).collect();
        for var in orphaned {
            let node = &g.nodes[&var];
            let probe = node
                .origin_query
                .clone()
                .or_else(|| node.label.clone())
                .unwrap_or_else(|| var.clone());
            let best = best_match(embedder, &probe, &candidates)?;
            match best {
                Some((anchor, sim)) if sim >= params.reanchor_threshold => {
                    g.edges.retain(|e| !(e.is_requires() && e.object == var));
                    let chunks = g.node_to_kbs.get(&var).cloned().unwrap_or_default();
                    g.edges.push(requires_edge(&anchor, &var, chunks, params));
                    g.nodes.get_mut(&var).expect("variable exists").anchor_node =
                        Some(anchor.clone());
                    report.reanchored.push((var, anchor));
                }
                _ => {
                    g.remove_node(&var);
                    report.variables_deleted.push(var);
                }
            }
        }
    }

    report.isolated_pruned = g.prune_isolated();
    for e in &mut g.edges {
        e.weight = params.final_weight(e.sem, e.act);
    }
    g.rebuild_indices();
    g.record_stats("post");
    Ok((g, report))
}
