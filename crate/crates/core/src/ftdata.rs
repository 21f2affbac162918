//! Planner finetuning data: graph context extraction, deterministic prompt
//! rendering, quality filtering, dialogue-level splits and chat-template
//! serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::parse_planner_output;
use crate::kg::{KnowledgeGraph, VAR_PREFIX};
use crate::prompts::PLANNER_SYSTEM_PROMPT;
use crate::providers::{cosine, ChatMessage, Embedder, Embedding, ProviderError};
use crate::sample::{FailureMode, UnifiedSample};
use crate::state::Action;
use crate::text::{normalize_variable, query_head};

/// Version stamp of [`GENERIC_PHRASES`].
pub const GENERIC_PHRASES_VERSION: &str = "generic-2026.1";

/// Phrases a missing variable must not resemble: a clarification built on
/// them tells the user nothing.
pub const GENERIC_PHRASES: &[&str] = &[
    "more information",
    "additional details",
    "the context",
    "relevant data",
    "further details",
    "specific information",
    "the answer",
    "other information",
    "the details",
    "something else",
];

/// Indent of wrapped lines inside a reasoning step.
const STEP_INDENT: &str = "         ";
/// Indent of wrapped lines inside a history entry.
const HISTORY_INDENT: &str = "        ";
const UNKNOWN_ALIAS: &str = "?unknown_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtParams {
    pub node_match_threshold: f64,
    pub top_nodes: usize,
    pub known_top: usize,
    pub ego_hops: usize,
    pub relevance_threshold: f64,
    pub max_triples: usize,
    pub generic_threshold: f64,
    pub anchor_threshold: f64,
    pub history_cap: usize,
}

impl Default for FtParams {
    fn default() -> Self {
        FtParams {
            node_match_threshold: 0.55,
            top_nodes: 5,
            known_top: 2,
            ego_hops: 2,
            relevance_threshold: 0.35,
            max_triples: 12,
            generic_threshold: 0.45,
            anchor_threshold: 0.20,
            history_cap: 6,
        }
    }
}

fn embed_batched(
    embedder: &dyn Embedder,
    texts: &[String],
) -> Result<Vec<Embedding>, ProviderError> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(64) {
        let refs: Vec<&str> = batch.iter().map(String::as_str).collect();
        out.extend(embedder.embed(&refs)?);
    }
    Ok(out)
}

/// Embeddings of every entity node name, computed once per graph.
#[derive(Debug, Clone, Default)]
pub struct NodeIndex {
    ids: Vec<String>,
    vecs: Vec<Embedding>,
}

impl NodeIndex {
    pub fn build(graph: &KnowledgeGraph, embedder: &dyn Embedder) -> Result<Self, ProviderError> {
        let ids: Vec<String> = graph.entity_nodes().map(|n| n.node_id.clone()).collect();
        let names: Vec<String> = ids.iter().map(|id| graph.nodes[id].name.clone()).collect();
        let vecs = if names.is_empty() {
            Vec::new()
        } else {
            embed_batched(embedder, &names)?
        };
        Ok(NodeIndex { ids, vecs })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Up to `k` nodes with similarity at least `threshold`, best first.
    pub fn top(&self, probe: &Embedding, threshold: f64, k: usize) -> Vec<(String, f64)> {
        let mut hits: Vec<(String, f64)> = self
            .ids
            .iter()
            .zip(&self.vecs)
            .map(|(id, v)| (id.clone(), cosine(probe, v)))
            .filter(|(_, s)| *s >= threshold)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub weight: f64,
    /// Per-sample `?unknown_N` name shown instead of a variable node id.
    pub alias: Option<String>,
}

impl ContextTriple {
    pub fn render(&self) -> String {
        format!(
            "{} | {} | {}",
            self.subject,
            self.relation,
            self.alias.as_deref().unwrap_or(&self.object)
        )
    }

    pub fn is_requires(&self) -> bool {
        self.relation == crate::kg::REQUIRES
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphContext {
    pub matched_nodes: Vec<(String, f64)>,
    /// Sorted by weight, descending.
    pub triples: Vec<ContextTriple>,
    pub includes_requires: bool,
}

impl GraphContext {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn lines(&self) -> Vec<String> {
        self.triples.iter().map(ContextTriple::render).collect()
    }

    /// Distinct relations in first-seen order.
    pub fn relations(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.triples {
            if !out.contains(&t.relation) {
                out.push(t.relation.clone());
            }
        }
        out
    }

    /// Distinct entity names from the first `limit` triples, variables excluded.
    pub fn entities(&self, limit: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.triples.iter().take(limit) {
            for name in [&t.subject, &t.object] {
                if !name.starts_with(VAR_PREFIX) && !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    pub fn aliases(&self) -> Vec<String> {
        self.triples
            .iter()
            .filter_map(|t| t.alias.clone())
            .collect()
    }
}

/// Whether `requires` triples pointing at variable nodes are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequiresMode {
    Include,
    Strip,
}

impl RequiresMode {
    /// ASK samples expose the variable nodes; everything else strips them.
    pub fn for_action(action: Action) -> Self {
        if action == Action::Ask {
            RequiresMode::Include
        } else {
            RequiresMode::Strip
        }
    }
}

/// Graph evidence for a query: nodes whose names match the query or a known
/// variable seed a 2-hop ego graph, whose triples are filtered by relevance
/// to the query and truncated to the heaviest `max_triples`.
pub fn extract_context(
    query: &str,
    known: &[String],
    graph: &KnowledgeGraph,
    index: &NodeIndex,
    embedder: &dyn Embedder,
    mode: RequiresMode,
    p: &FtParams,
) -> Result<GraphContext, ProviderError> {
    let qv = embedder.embed_one(query)?;
    let mut matched = index.top(&qv, p.node_match_threshold, p.top_nodes);
    // Known-variable matches widen the seed set; they are reported only when
    // the query itself matched nothing.
    let mut by_known: Vec<(String, f64)> = Vec::new();
    if !known.is_empty() {
        for kv in embed_batched(embedder, known)? {
            for (id, sim) in index.top(&kv, p.node_match_threshold, p.known_top) {
                match by_known.iter_mut().find(|(m, _)| *m == id) {
                    Some(slot) => slot.1 = slot.1.max(sim),
                    None => by_known.push((id, sim)),
                }
            }
        }
    }
    let mut seeds: Vec<String> = matched.iter().map(|(id, _)| id.clone()).collect();
    for (id, _) in &by_known {
        if !seeds.contains(id) {
            seeds.push(id.clone());
        }
    }
    if seeds.is_empty() {
        return Ok(GraphContext::default());
    }
    if matched.is_empty() {
        matched = by_known;
    }
    let ego = graph.ego(&seeds, p.ego_hops, false);

    let candidates: Vec<usize> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.is_requires() && ego.contains(&e.subject) && ego.contains(&e.object))
        .map(|(i, _)| i)
        .collect();
    let mut triples = Vec::new();
    if !candidates.is_empty() {
        let texts: Vec<String> = candidates
            .iter()
            .map(|&i| {
                let e = &graph.edges[i];
                format!("{} {} {}", e.subject, e.relation, e.object)
            })
            .collect();
        for (&i, v) in candidates.iter().zip(embed_batched(embedder, &texts)?) {
            if cosine(&qv, &v) >= p.relevance_threshold {
                let e = &graph.edges[i];
                triples.push(ContextTriple {
                    subject: e.subject.clone(),
                    relation: e.relation.clone(),
                    object: e.object.clone(),
                    weight: e.weight,
                    alias: None,
                });
            }
        }
    }
    if mode == RequiresMode::Include {
        for e in graph
            .edges
            .iter()
            .filter(|e| e.is_requires() && ego.contains(&e.subject))
        {
            triples.push(ContextTriple {
                subject: e.subject.clone(),
                relation: e.relation.clone(),
                object: e.object.clone(),
                weight: e.weight,
                alias: Some(String::new()),
            });
        }
    }
    // Stable: requires triples come first among equal weights, then heavier
    // relational triples keep graph order.
    triples.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| b.alias.is_some().cmp(&a.alias.is_some()))
    });
    triples.truncate(p.max_triples);
    let mut n = 0;
    for t in triples.iter_mut().filter(|t| t.alias.is_some()) {
        n += 1;
        t.alias = Some(format!("{UNKNOWN_ALIAS}{n}"));
    }
    Ok(GraphContext {
        matched_nodes: matched,
        includes_requires: n > 0,
        triples,
    })
}

/// `Regarding {anchor}: could you specify {missing}?`
///
/// The anchor is the known variable most similar to `missing` when that
/// similarity reaches `threshold`. Otherwise it falls back to a known
/// variable mentioned in the query, the query head noun, the first known
/// variable, and finally a generic phrase.
pub fn build_question(
    missing: &str,
    known: &[String],
    query: &str,
    embedder: &dyn Embedder,
    threshold: f64,
) -> String {
    let missing = missing.trim();
    let by_similarity = || -> Option<String> {
        if known.is_empty() || missing.is_empty() {
            return None;
        }
        let mv = embedder.embed_one(missing).ok()?;
        let kvs = embed_batched(embedder, known).ok()?;
        known
            .iter()
            .zip(kvs)
            .map(|(k, v)| (k, cosine(&mv, &v)))
            .filter(|(_, s)| *s >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
    };
    let q = normalize_variable(query);
    let anchor = by_similarity()
        .or_else(|| {
            known
                .iter()
                .find(|k| q.contains(&normalize_variable(k)))
                .cloned()
        })
        .or_else(|| query_head(query))
        .or_else(|| known.first().cloned())
        .unwrap_or_else(|| "your question".to_string());
    let missing = if missing.is_empty() {
        "the missing detail"
    } else {
        missing
    };
    format!("Regarding {anchor}: could you specify {missing}?")
}

/// One earlier exchange of a dialogue as shown to the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub turn: usize,
    pub query: String,
    pub action: Action,
    /// Variable the system asked for, on ASK turns.
    pub asked: Option<String>,
    /// Variable the user's reply resolved.
    pub resolved: Option<String>,
}

impl HistoryEntry {
    fn render(&self) -> String {
        let answer = match (self.action, &self.asked) {
            (Action::Ask, Some(v)) => format!("[Clarification requested: '{v}' is needed]"),
            (Action::Ask, None) => "[Clarification requested]".to_string(),
            (Action::Answer, _) => "[Answered from graph evidence]".to_string(),
            (Action::Abstain, _) => "[Abstained: information unavailable]".to_string(),
        };
        let mut out = format!(
            "Turn {} | {} | Q: \"{}\"\n{HISTORY_INDENT}| A: {answer}",
            self.turn,
            self.action.as_str(),
            self.query
        );
        if let Some(r) = &self.resolved {
            out.push_str(&format!("\n{HISTORY_INDENT}→ resolved: '{r}'"));
        }
        out
    }
}

fn join_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.join(", ")
    }
}

fn quoted(items: &[String]) -> String {
    items
        .iter()
        .map(|s| format!("'{s}'"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Known variables of the sample followed by those resolved earlier in the
/// dialogue.
pub fn merge_known(known: &[String], history: &[HistoryEntry]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for k in known
        .iter()
        .chain(history.iter().filter_map(|h| h.resolved.as_ref()))
    {
        if !out
            .iter()
            .any(|o| normalize_variable(o) == normalize_variable(k))
        {
            out.push(k.clone());
        }
    }
    out
}

/// The planner user turn. History, resolved and remaining blocks appear only
/// when there is history; it is truncated to the `cap` most recent turns.
pub fn render_user(
    query: &str,
    known: &[String],
    missing: &[String],
    context_lines: &[String],
    history: &[HistoryEntry],
    cap: usize,
) -> String {
    let mut out = String::new();
    if !history.is_empty() {
        let shown = &history[history.len().saturating_sub(cap)..];
        let entries: Vec<String> = shown.iter().map(HistoryEntry::render).collect();
        out.push_str(&format!(
            "<conversation_history>\n{}\n</conversation_history>\n",
            entries.join("\n")
        ));
        let resolved: Vec<String> = history.iter().filter_map(|h| h.resolved.clone()).collect();
        out.push_str(&format!(
            "<resolved_variables> {} </resolved_variables>\n",
            join_or_none(&resolved)
        ));
        out.push_str(&format!(
            "<remaining_unknowns> {} </remaining_unknowns>\n",
            join_or_none(missing)
        ));
    }
    out.push_str(&format!("<query> {} </query>\n", query.trim()));
    out.push_str(&format!(
        "<known_variables> {} </known_variables>\n",
        join_or_none(known)
    ));
    out.push_str("<graph_context>\n");
    for line in context_lines {
        out.push_str(&format!("  {line}\n"));
    }
    out.push_str("</graph_context>\n");
    out.push_str(&format!(
        "<missing_variables> {} </missing_variables>",
        join_or_none(missing)
    ));
    out
}

/// Everything the assistant turn is filled from.
#[derive(Debug, Clone, PartialEq)]
pub struct AssistantFacts {
    pub action: Action,
    pub query: String,
    pub known: Vec<String>,
    pub missing: Vec<String>,
    pub matched_nodes: Vec<String>,
    pub relations: Vec<String>,
    pub lead_triple: Option<String>,
    pub aliases: Vec<String>,
    pub failure_mode: FailureMode,
    /// Required for ASK.
    pub question: Option<String>,
}

impl AssistantFacts {
    fn subject(&self) -> String {
        if !self.known.is_empty() {
            self.known.join(", ")
        } else {
            query_head(&self.query).unwrap_or_else(|| "the query topic".to_string())
        }
    }
}

/// The four-step reasoning chain, decision and justification, filled from
/// graph facts only.
pub fn render_assistant(f: &AssistantFacts) -> String {
    let i = STEP_INDENT;
    let subject = f.subject();
    let matched = if f.matched_nodes.is_empty() {
        "none".to_string()
    } else {
        quoted(&f.matched_nodes)
    };
    let relations = join_or_none(&f.relations);
    let known = join_or_none(&f.known);
    let step1 = format!(
        "Step 1 — Query subject: {subject}.\n{i}Query asks: '{}'",
        f.query.trim()
    );
    let gap = if !f.missing.is_empty() {
        quoted(&f.missing)
    } else if !f.aliases.is_empty() {
        quoted(&f.aliases)
    } else {
        "'the linking variable'".to_string()
    };
    let (step2_tail, step3_missing, step4, justification) = match f.action {
        Action::Answer => {
            let lead = f.lead_triple.clone().unwrap_or_else(|| "the matched triples".to_string());
            (
                format!("The triples connect the\n{i}known entities into a complete path."),
                "none".to_string(),
                format!(
                    "graph evidence covers every required\n{i}variable; the answer is grounded in: '{lead}'."
                ),
                format!("The graph triple '{lead}' answers the question about {subject}."),
            )
        }
        Action::Ask => (
            if f.aliases.is_empty() {
                format!("No variable placeholder links the\n{i}missing information; path cannot be completed.")
            } else {
                format!("Variable placeholder nodes\n{i}indicate missing information; path cannot be completed.")
            },
            gap.clone(),
            format!("graph has partial connections but\n{i}cannot complete the reasoning path without: {gap}."),
            f.question.clone().unwrap_or_default(),
        ),
        Action::Abstain => {
            let absent = if f.missing.is_empty() { "'the query topic'".to_string() } else { gap.clone() };
            if f.matched_nodes.is_empty() {
                (
                    format!("The query topic is absent\n{i}from the graph."),
                    absent,
                    format!("no relevant graph evidence exists and\n{i}clarification cannot supply the missing topic."),
                    format!("The knowledge graph has no nodes related to {subject}."),
                )
            } else {
                (
                    format!("The matched nodes do not\n{i}reach the information the query needs."),
                    absent.clone(),
                    format!("the gap cannot be closed by clarification;\n{i}answering would require unsupported content."),
                    format!("The graph covers {subject} but holds nothing on {}.", absent.replace('\'', "")),
                )
            }
        }
    };
    let failure = if f.action == Action::Answer {
        FailureMode::Complete
    } else {
        f.failure_mode
    };
    let mut out = format!(
        "<reasoning>\n{step1}\nStep 2 — Graph search: matched KG nodes: {matched}.\n{i}Relations seen: {relations}. {step2_tail}\n\
         Step 3 — Variable check: Known: {known}.\n{i}Required but absent from graph: {step3_missing}.\n{i}Failure mode: {}.\n\
         Step 4 — Decision rationale: {step4}\n</reasoning>\n<decision> {} </decision>\n<justification>\n{justification}\n</justification>",
        failure.as_str(),
        f.action.as_str(),
    );
    if f.action == Action::Ask {
        out.push_str(&format!(
            "\n<clarification_question>\n{justification}\n</clarification_question>"
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSample {
    pub id: String,
    pub dialogue_id: String,
    pub action: Action,
    pub system: String,
    pub user: String,
    pub assistant: String,
    pub split: Option<Split>,
    /// The rendered history was cut to the cap.
    pub history_truncated: bool,
}

/// Renders one sample. `history` holds the dialogue's earlier turns.
pub fn render(
    sample: &UnifiedSample,
    context: &GraphContext,
    history: &[HistoryEntry],
    embedder: &dyn Embedder,
    p: &FtParams,
) -> FinetuneSample {
    let known = merge_known(&sample.state.known_variables, history);
    let missing: Vec<String> = if sample.action == Action::Answer {
        Vec::new()
    } else {
        sample
            .state
            .missing_variables
            .iter()
            .filter(|m| !known.contains(m))
            .cloned()
            .collect()
    };
    let question = (sample.action == Action::Ask).then(|| {
        let target = missing
            .first()
            .cloned()
            .or_else(|| context.aliases().first().cloned())
            .unwrap_or_default();
        build_question(&target, &known, &sample.query, embedder, p.anchor_threshold)
    });
    let facts = AssistantFacts {
        action: sample.action,
        query: sample.query.clone(),
        known: known.clone(),
        missing: missing.clone(),
        matched_nodes: context
            .matched_nodes
            .iter()
            .map(|(n, _)| n.clone())
            .collect(),
        relations: context.relations(),
        lead_triple: context.triples.first().map(ContextTriple::render),
        aliases: context.aliases(),
        failure_mode: sample.state.failure_mode,
        question,
    };
    FinetuneSample {
        id: sample.id.clone(),
        dialogue_id: sample.dialogue_key(),
        action: sample.action,
        system: PLANNER_SYSTEM_PROMPT.to_string(),
        user: render_user(
            &sample.query,
            &known,
            &missing,
            &context.lines(),
            history,
            p.history_cap,
        ),
        assistant: render_assistant(&facts),
        split: None,
        history_truncated: history.len() > p.history_cap,
    }
}

/// Body of the first `<tag>...</tag>` block, trimmed.
pub fn tag_body<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = start + text[start..].find(&close)?;
    Some(text[start..end].trim())
}

/// Comma-separated list in a tag; `none` means empty.
pub fn tag_list(text: &str, tag: &str) -> Vec<String> {
    match tag_body(text, tag) {
        None | Some("none") | Some("") => Vec::new(),
        Some(body) => body
            .split(", ")
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    }
}

/// `subject | relation | object` lines of a rendered graph context.
pub fn context_lines(user: &str) -> Vec<(String, String, String)> {
    tag_body(user, "graph_context")
        .unwrap_or("")
        .lines()
        .filter_map(|l| {
            let parts: Vec<&str> = l.trim().split(" | ").collect();
            (parts.len() == 3).then(|| {
                (
                    parts[0].to_string(),
                    parts[1].to_string(),
                    parts[2].to_string(),
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyResponse,
    MalformedTags,
    AnswerEmptyGraph,
    AnswerGraphIrrelevant,
    AskNoMissingNoVarNodes,
    GenericMissingVariable,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EmptyResponse => "empty_response",
            RejectReason::MalformedTags => "malformed_tags",
            RejectReason::AnswerEmptyGraph => "answer_empty_graph",
            RejectReason::AnswerGraphIrrelevant => "answer_graph_irrelevant",
            RejectReason::AskNoMissingNoVarNodes => "ask_no_missing_no_var_nodes",
            RejectReason::GenericMissingVariable => "generic_missing_variable",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Embeddings of [`GENERIC_PHRASES`], computed once.
pub struct GenericFilter {
    vecs: Vec<Embedding>,
    threshold: f64,
}

impl GenericFilter {
    pub fn new(embedder: &dyn Embedder, threshold: f64) -> Result<Self, ProviderError> {
        let phrases: Vec<String> = GENERIC_PHRASES.iter().map(|s| s.to_string()).collect();
        Ok(GenericFilter {
            vecs: embed_batched(embedder, &phrases)?,
            threshold,
        })
    }

    pub fn is_generic(&self, embedder: &dyn Embedder, phrase: &str) -> Result<bool, ProviderError> {
        let v = embedder.embed_one(phrase)?;
        Ok(self.vecs.iter().any(|g| cosine(&v, g) > self.threshold))
    }
}

/// Runs the quality checks on a rendered sample. Everything is read back
/// from the rendered text, so the filter can be re-run on emitted data.
pub fn quality_filter(
    candidate: &FinetuneSample,
    generic: &GenericFilter,
    embedder: &dyn Embedder,
) -> Result<Result<(), RejectReason>, ProviderError> {
    let query = tag_body(&candidate.user, "query").unwrap_or("");
    if candidate.assistant.trim().is_empty() || query.is_empty() {
        return Ok(Err(RejectReason::EmptyResponse));
    }
    match parse_planner_output(&candidate.assistant) {
        Ok(d) if d.action == candidate.action && !d.non_strict => {}
        _ => return Ok(Err(RejectReason::MalformedTags)),
    }
    let lines = context_lines(&candidate.user);
    let known: Vec<String> = tag_list(&candidate.user, "known_variables")
        .iter()
        .map(|k| normalize_variable(k))
        .collect();
    let missing = tag_list(&candidate.user, "missing_variables");
    match candidate.action {
        Action::Answer => {
            if lines.is_empty() {
                return Ok(Err(RejectReason::AnswerEmptyGraph));
            }
            let grounded = lines.iter().any(|(s, _, o)| {
                known.iter().any(|k| {
                    [s, o]
                        .iter()
                        .any(|n| n.contains(k.as_str()) || k.contains(n.as_str()))
                })
            });
            if !grounded {
                return Ok(Err(RejectReason::AnswerGraphIrrelevant));
            }
        }
        Action::Ask => {
            let var_nodes = lines.iter().any(|(_, r, _)| r == crate::kg::REQUIRES);
            if missing.is_empty() && !var_nodes {
                return Ok(Err(RejectReason::AskNoMissingNoVarNodes));
            }
            for m in &missing {
                if generic.is_generic(embedder, m)? {
                    return Ok(Err(RejectReason::GenericMissingVariable));
                }
            }
        }
        Action::Abstain => {}
    }
    Ok(Ok(()))
}

/// Assigns whole dialogues to splits. Dialogue keys are shuffled with a
/// seeded ChaCha stream and cut by the rounded fractions.
pub fn split(keys: &[String], fractions: [f64; 3], seed: u64) -> BTreeMap<String, Split> {
    let mut unique: Vec<String> = keys
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: f64 = fractions.iter().sum();
    let n = unique.len();
    let n_train = ((fractions[0] / total) * n as f64).round() as usize;
    let n_val = (((fractions[1] / total) * n as f64).round() as usize).min(n - n_train.min(n));
    unique
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (k, s)
        })
        .collect()
}

/// Dialogue ids that appear in more than one split.
pub fn contamination(samples: &[FinetuneSample]) -> Vec<String> {
    let mut seen: BTreeMap<&str, BTreeSet<Option<Split>>> = BTreeMap::new();
    for s in samples {
        seen.entry(&s.dialogue_id).or_default().insert(s.split);
    }
    seen.into_iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(k, _)| k.to_string())
        .collect()
}

const TEMPLATE_OPEN: &str = "<s>[INST] ";
const TEMPLATE_MID: &str = " [/INST] ";
const TEMPLATE_CLOSE: &str = "</s>";

/// Template string plus the prompt length a trainer needs to mask the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub id: String,
    pub text: String,
    pub prompt_length_chars: usize,
    pub split: Option<Split>,
}

pub fn to_chat_template(s: &FinetuneSample) -> TemplateRecord {
    let prompt = format!("{TEMPLATE_OPEN}{} {}{TEMPLATE_MID}", s.system, s.user);
    let text = format!("{prompt}{}{TEMPLATE_CLOSE}", s.assistant);
    TemplateRecord {
        id: s.id.clone(),
        prompt_length_chars: prompt.chars().count(),
        text,
        split: s.split,
    }
}

/// Inverse of [`to_chat_template`] for the planner system prompt.
pub fn parse_chat_template(text: &str) -> Option<(String, String, String)> {
    let inner = text
        .strip_prefix(TEMPLATE_OPEN)?
        .strip_suffix(TEMPLATE_CLOSE)?;
    let rest = inner
        .strip_prefix(PLANNER_SYSTEM_PROMPT)?
        .strip_prefix(' ')?;
    let (user, assistant) = rest.split_once(TEMPLATE_MID)?;
    Some((
        PLANNER_SYSTEM_PROMPT.to_string(),
        user.to_string(),
        assistant.to_string(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub id: String,
    pub dialogue_id: String,
    pub action: Action,
    pub split: Option<Split>,
    pub messages: Vec<ChatMessage>,
}

pub fn to_chat_record(s: &FinetuneSample) -> ChatRecord {
    ChatRecord {
        id: s.id.clone(),
        dialogue_id: s.dialogue_id.clone(),
        action: s.action,
        split: s.split,
        messages: vec![
            ChatMessage::system(s.system.clone()),
            ChatMessage::user(s.user.clone()),
            ChatMessage::assistant(s.assistant.clone()),
        ],
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub split_counts: BTreeMap<String, usize>,
    pub history_cap: usize,
    pub truncated_histories: usize,
    pub generic_phrases_version: String,
}

/// History entries for every sample, keyed by sample id. Turns of a
/// dialogue are ordered by turn id; every earlier ASK turn counts as
/// resolved by the turn that follows it.
pub fn dialogue_histories(samples: &[UnifiedSample]) -> BTreeMap<String, Vec<HistoryEntry>> {
    let mut groups: BTreeMap<String, Vec<&UnifiedSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.dialogue_key()).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for turns in groups.values_mut() {
        turns.sort_by(|a, b| {
            a.metadata
                .turn_id
                .unwrap_or(0)
                .cmp(&b.metadata.turn_id.unwrap_or(0))
                .then_with(|| a.id.cmp(&b.id))
        });
        let mut history = Vec::new();
        for (n, s) in turns.iter().enumerate() {
            out.insert(s.id.clone(), history.clone());
            let asked = (s.action == Action::Ask)
                .then(|| s.state.missing_variables.first().cloned())
                .flatten();
            history.push(HistoryEntry {
                turn: n + 1,
                query: s.query.clone(),
                action: s.action,
                asked: asked.clone(),
                resolved: asked,
            });
        }
    }
    out
}

/// Accepted samples (with splits assigned) and the filter report.
pub fn build_dataset(
    samples: &[UnifiedSample],
    graph: &KnowledgeGraph,
    embedder: &dyn Embedder,
    p: &FtParams,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<FinetuneSample>, FilterReport), ProviderError> {
    let index = NodeIndex::build(graph, embedder)?;
    let generic = GenericFilter::new(embedder, p.generic_threshold)?;
    let histories = dialogue_histories(samples);
    let results: Vec<(FinetuneSample, Result<(), RejectReason>)> = samples
        .par_iter()
        .map(|s| {
            let history = &histories[&s.id];
            let known = merge_known(&s.state.known_variables, history);
            let ctx = extract_context(
                &s.query,
                &known,
                graph,
                &index,
                embedder,
                RequiresMode::for_action(s.action),
                p,
            )?;
            let ft = render(s, &ctx, history, embedder, p);
            let verdict = quality_filter(&ft, &generic, embedder)?;
            Ok((ft, verdict))
        })
        .collect::<Result<_, ProviderError>>()?;

    let mut report = FilterReport {
        history_cap: p.history_cap,
        generic_phrases_version: GENERIC_PHRASES_VERSION.to_string(),
        ..Default::default()
    };
    let mut accepted = Vec::new();
    for (ft, verdict) in results {
        match verdict {
            Ok(()) => {
                report.truncated_histories += usize::from(ft.history_truncated);
                accepted.push(ft);
            }
            Err(r) => {
                *report
                    .rejected_by_reason
                    .entry(r.as_str().to_string())
                    .or_default() += 1
            }
        }
    }
    report.accepted = accepted.len();
    let keys: Vec<String> = accepted.iter().map(|s| s.dialogue_id.clone()).collect();
    let assignment = split(&keys, fractions, seed);
    for s in &mut accepted {
        let sp = assignment[&s.dialogue_id];
        s.split = Some(sp);
        *report
            .split_counts
            .entry(sp.as_str().to_string())
            .or_default() += 1;
    }
    Ok((accepted, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::testutil::{edge, graph};
    use crate::kg::{KgNode, NodeKind, REQUIRES};
    use crate::providers::{EntityCategory, HashEmbedder};
    use crate::sample::fixtures::sample;

    fn emb() -> HashEmbedder {
        HashEmbedder::default()
    }

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn question_template_and_anchor() {
        let q = build_question(
            "employment type",
            &strings(&["pension plan"]),
            "Am I eligible for the pension plan?",
            &emb(),
            0.20,
        );
        assert_eq!(
            q,
            "Regarding pension plan: could you specify employment type?"
        );
        let q = build_question(
            "sales performance",
            &strings(&["album", "release date"]),
            "How did the album sell?",
            &emb(),
            0.20,
        );
        assert_eq!(q, "Regarding album: could you specify sales performance?");
        let q = build_question(
            "ticket price",
            &[],
            "Where was the concert held?",
            &emb(),
            0.20,
        );
        assert_eq!(q, "Regarding concert: could you specify ticket price?");
        let q = build_question(
            "release year",
            &strings(&["album release"]),
            "x",
            &emb(),
            0.20,
        );
        assert_eq!(
            q,
            "Regarding album release: could you specify release year?"
        );
    }

    #[test]
    fn empty_context_when_nothing_matches() {
        let g = graph(&[("bloc party", "silent alarm", 0.8)]);
        let idx = NodeIndex::build(&g, &emb()).unwrap();
        let ctx = extract_context(
            "weather in lisbon",
            &[],
            &g,
            &idx,
            &emb(),
            RequiresMode::Include,
            &FtParams::default(),
        )
        .unwrap();
        assert!(ctx.is_empty());
        assert!(ctx.matched_nodes.is_empty());
    }

    fn star(n: usize) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::default();
        g.nodes.insert(
            "alarm".into(),
            KgNode::entity("alarm", EntityCategory::Work),
        );
        for i in 0..n {
            let name = format!("alarm {}", ["red", "blue", "green", "gold", "grey"][i % 5]);
            let name = format!("{name} {i}");
            g.nodes
                .insert(name.clone(), KgNode::entity(&name, EntityCategory::Work));
            g.edges
                .push(edge("alarm", "rel", &name, 0.3 + i as f64 * 0.01));
        }
        g.rebuild_indices();
        g
    }

    #[test]
    fn keeps_twelve_heaviest() {
        let g = star(20);
        let idx = NodeIndex::build(&g, &emb()).unwrap();
        let p = FtParams {
            relevance_threshold: 0.0,
            ..FtParams::default()
        };
        let ctx = extract_context("alarm", &[], &g, &idx, &emb(), RequiresMode::Strip, &p).unwrap();
        assert_eq!(ctx.triples.len(), 12);
        let weights: Vec<f64> = ctx.triples.iter().map(|t| t.weight).collect();
        assert!(weights.windows(2).all(|w| w[0] >= w[1]));
        assert!((weights[11] - 0.38).abs() < 1e-9);
    }

    #[test]
    fn requires_triples_get_aliases_and_are_stripped_for_answers() {
        let mut g = graph(&[("album", "bloc party", 0.7)]);
        let mut var = KgNode::entity("?var_s9", EntityCategory::Concept);
        var.kind = NodeKind::Variable;
        g.nodes.insert("?var_s9".into(), var);
        let mut req = edge("album", REQUIRES, "?var_s9", 0.9);
        req.sem = 0.9;
        g.edges.push(req);
        g.rebuild_indices();
        let idx = NodeIndex::build(&g, &emb()).unwrap();
        let p = FtParams {
            relevance_threshold: 0.0,
            ..FtParams::default()
        };
        let ask = extract_context(
            "album sales",
            &[],
            &g,
            &idx,
            &emb(),
            RequiresMode::Include,
            &p,
        )
        .unwrap();
        assert_eq!(ask.lines()[0], "album | requires | ?unknown_1");
        assert!(ask.includes_requires);
        let ans = extract_context(
            "album sales",
            &[],
            &g,
            &idx,
            &emb(),
            RequiresMode::Strip,
            &p,
        )
        .unwrap();
        assert!(ans.triples.iter().all(|t| !t.is_requires()));
        assert!(!ans.lines().iter().any(|l| l.contains(UNKNOWN_ALIAS)));
    }

    fn ctx(lines: &[(&str, &str, &str)]) -> GraphContext {
        GraphContext {
            matched_nodes: vec![("album".into(), 0.7)],
            triples: lines
                .iter()
                .enumerate()
                .map(|(i, (s, r, o))| ContextTriple {
                    subject: s.to_string(),
                    relation: r.to_string(),
                    object: o.to_string(),
                    weight: 0.9 - i as f64 * 0.1,
                    alias: (*r == REQUIRES).then(|| format!("?unknown_{}", i + 1)),
                })
                .collect(),
            includes_requires: lines.iter().any(|l| l.1 == REQUIRES),
        }
    }

    fn filter(ft: &FinetuneSample) -> Result<(), RejectReason> {
        quality_filter(ft, &GenericFilter::new(&emb(), 0.45).unwrap(), &emb()).unwrap()
    }

    #[test]
    fn single_turn_render_has_no_history_blocks() {
        let s = sample("s1", Action::Answer, &["album"], &[]);
        let ft = render(
            &s,
            &ctx(&[("album", "release", "february 2005")]),
            &[],
            &emb(),
            &FtParams::default(),
        );
        assert!(ft.user.starts_with("<query> "));
        assert!(!ft.user.contains("<conversation_history>"));
        assert!(!ft.assistant.contains("<clarification_question>"));
        assert_eq!(filter(&ft), Ok(()));
        assert_eq!(
            parse_planner_output(&ft.assistant).unwrap().action,
            Action::Answer
        );
    }

    #[test]
    fn filter_reasons() {
        let p = FtParams::default();
        let s = sample("s1", Action::Answer, &["album"], &[]);
        assert_eq!(
            filter(&render(&s, &GraphContext::default(), &[], &emb(), &p)),
            Err(RejectReason::AnswerEmptyGraph)
        );
        let off = ctx(&[("bloc party", "form", "london")]);
        assert_eq!(
            filter(&render(&s, &off, &[], &emb(), &p)),
            Err(RejectReason::AnswerGraphIrrelevant)
        );

        let ask = sample("s2", Action::Ask, &["album"], &[]);
        assert_eq!(
            filter(&render(&ask, &off, &[], &emb(), &p)),
            Err(RejectReason::AskNoMissingNoVarNodes)
        );
        let with_var = ctx(&[("album", REQUIRES, "?var_x")]);
        assert_eq!(filter(&render(&ask, &with_var, &[], &emb(), &p)), Ok(()));
        let generic = sample("s3", Action::Ask, &["album"], &["more information"]);
        assert_eq!(
            filter(&render(&generic, &off, &[], &emb(), &p)),
            Err(RejectReason::GenericMissingVariable)
        );

        let mut broken = render(&s, &ctx(&[("album", "release", "2005")]), &[], &emb(), &p);
        broken.assistant = broken.assistant.replace("</decision>", "");
        assert_eq!(filter(&broken), Err(RejectReason::MalformedTags));
        broken.assistant.clear();
        assert_eq!(filter(&broken), Err(RejectReason::EmptyResponse));
    }

    #[test]
    fn histories_are_capped() {
        let history: Vec<HistoryEntry> = (1..=8)
            .map(|t| HistoryEntry {
                turn: t,
                query: format!("q{t}?"),
                action: Action::Answer,
                asked: None,
                resolved: None,
            })
            .collect();
        let user = render_user("q9?", &[], &[], &[], &history, 6);
        assert!(!user.contains("Turn 2 |"));
        assert!(user
            .contains("Turn 3 | ANSWER | Q: \"q3?\"\n        | A: [Answered from graph evidence]"));
    }

    #[test]
    fn split_is_dialogue_atomic_and_proportional() {
        let keys: Vec<String> = (0..100)
            .flat_map(|d| (0..(d % 3 + 1)).map(move |_| format!("dlg:{d}")))
            .collect();
        let a = split(&keys, [0.8, 0.1, 0.1], 42);
        let counts = a.values().fold(BTreeMap::new(), |mut m, s| {
            *m.entry(*s).or_insert(0) += 1;
            m
        });
        assert_eq!(counts[&Split::Train], 80);
        assert_eq!(counts[&Split::Val], 10);
        assert_eq!(counts[&Split::Test], 10);
        assert_eq!(a, split(&keys, [0.8, 0.1, 0.1], 42));
        assert_ne!(a, split(&keys, [0.8, 0.1, 0.1], 43));
    }

    #[test]
    fn template_round_trip() {
        let s = sample("s1", Action::Answer, &["album"], &[]);
        let ft = render(
            &s,
            &ctx(&[("album", "release", "2005")]),
            &[],
            &emb(),
            &FtParams::default(),
        );
        let rec = to_chat_template(&ft);
        assert!(rec.text.starts_with("<s>[INST] "));
        assert!(rec.text.ends_with("</s>"));
        assert!(rec
            .text
            .chars()
            .take(rec.prompt_length_chars)
            .collect::<String>()
            .ends_with(" [/INST] "));
        let (sys, user, asst) = parse_chat_template(&rec.text).unwrap();
        assert_eq!((sys, user, asst), (ft.system, ft.user, ft.assistant));
    }
}
