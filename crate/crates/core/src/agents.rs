//! Planner invocation and output grammar, the answer, ask and abstain
//! agents, and the multi-turn session router.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decision::{
    classify_answerability, compute_signals, hard_gate, AnswerabilityLabel, GateThresholds,
    SignalVector, CLASSIFIER_PROMPT,
};
use crate::ftdata::{
    build_question, context_lines, extract_context, render_assistant, render_user, tag_body,
    tag_list, AssistantFacts, FtParams, GraphContext, HistoryEntry, NodeIndex, RequiresMode,
};
use crate::kg::{KnowledgeGraph, REQUIRES};
use crate::prompts::{
    fill, ABSTAIN_PROMPT, ANSWER_PROMPT_HEAD, ANSWER_PROMPT_TAIL, ANSWER_SOURCE_BLOCK, ASK_PROMPT,
    PLANNER_SYSTEM_PROMPT,
};
use crate::providers::{
    ChatMessage, ChatProvider, ChatRole, Decoding, Embedder, Embedding, ProviderError, Providers,
};
use crate::retrieval::{
    hybrid_retrieve, rerank_and_compress, Index, RetrievalError, DECOMPOSE_PROMPT, REWRITE_PROMPT,
    VERIFY_PROMPT,
};
use crate::sample::FailureMode;
use crate::state::{Action, DialogueTurn, InformationState, StateError};
use crate::text::{content_terms, normalize_variable, query_head};

/// Output tags in their required order. Only the last is optional.
pub const PLANNER_TAGS: [&str; 4] = [
    "reasoning",
    "decision",
    "justification",
    "clarification_question",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum GrammarError {
    MissingTag(String),
    /// Duplicated, or out of the reasoning, decision, justification order.
    MisorderedTag(String),
    InvalidDecision(String),
    MissingStep(u8),
    EmptyField(String),
    MissingQuestion,
    QuestionWithoutMark,
}

impl fmt::Display for GrammarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrammarError::MissingTag(t) => write!(f, "missing <{t}> tag"),
            GrammarError::MisorderedTag(t) => write!(f, "misordered or duplicated <{t}> tag"),
            GrammarError::InvalidDecision(d) => write!(f, "invalid decision token {d:?}"),
            GrammarError::MissingStep(n) => write!(f, "reasoning lacks Step {n}"),
            GrammarError::EmptyField(t) => write!(f, "<{t}> is empty"),
            GrammarError::MissingQuestion => f.write_str("ASK without <clarification_question>"),
            GrammarError::QuestionWithoutMark => {
                f.write_str("clarification question does not end with '?'")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDecision {
    pub reasoning_steps: Vec<String>,
    pub action: Action,
    pub justification: String,
    pub clarification_question: Option<String>,
    pub raw: String,
    /// The decision token was accepted only after case folding.
    pub non_strict: bool,
    /// Parsing failed and a fallback decision was substituted.
    pub malformed: bool,
    pub parse_errors: Vec<GrammarError>,
}

struct TagSpan {
    open: usize,
    close: usize,
}

fn locate(
    text: &str,
    tag: &str,
    errors: &mut Vec<GrammarError>,
    optional: bool,
) -> Option<TagSpan> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let opens: Vec<usize> = text.match_indices(&open).map(|(i, _)| i).collect();
    let closes: Vec<usize> = text.match_indices(&close).map(|(i, _)| i).collect();
    match (opens.len(), closes.len()) {
        (0, 0) if optional => None,
        (1, 1) if opens[0] < closes[0] => Some(TagSpan {
            open: opens[0],
            close: closes[0],
        }),
        (o, c) if o > 1 || c > 1 || (o == 1 && c == 1) => {
            errors.push(GrammarError::MisorderedTag(tag.to_string()));
            None
        }
        _ => {
            errors.push(GrammarError::MissingTag(tag.to_string()));
            None
        }
    }
}

fn reasoning_steps(body: &str, errors: &mut Vec<GrammarError>) -> Vec<String> {
    let mut marks = Vec::new();
    let mut from = 0;
    for n in 1..=4u8 {
        match body[from..].find(&format!("Step {n}")) {
            Some(i) => {
                marks.push(from + i);
                from += i + 6;
            }
            None => {
                errors.push(GrammarError::MissingStep(n));
                return Vec::new();
            }
        }
    }
    (0..4)
        .map(|k| {
            let end = marks.get(k + 1).copied().unwrap_or(body.len());
            body[marks[k] + 6..end]
                .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '—' | '-' | ':'))
                .trim_end()
                .to_string()
        })
        .collect()
}

/// Strict tag grammar for planner output. Every missing, duplicated or
/// misordered tag is reported separately. A decision token that is only
/// correct after upper-casing is accepted with `non_strict` set.
pub fn parse_planner_output(text: &str) -> Result<PlannerDecision, Vec<GrammarError>> {
    let mut errors = Vec::new();
    let spans: Vec<Option<TagSpan>> = PLANNER_TAGS
        .iter()
        .enumerate()
        .map(|(i, t)| locate(text, t, &mut errors, i == 3))
        .collect();
    let mut last_close = 0;
    for (tag, span) in PLANNER_TAGS.iter().zip(&spans) {
        if let Some(s) = span {
            if s.open < last_close {
                errors.push(GrammarError::MisorderedTag(tag.to_string()));
            }
            last_close = s.close;
        }
    }
    let body = |i: usize| -> Option<&str> {
        spans[i]
            .as_ref()
            .map(|s| text[s.open + PLANNER_TAGS[i].len() + 2..s.close].trim())
    };
    let steps = body(0)
        .map(|b| reasoning_steps(b, &mut errors))
        .unwrap_or_default();
    let mut non_strict = false;
    let action = body(1).and_then(|token| match token.parse::<Action>() {
        Ok(a) => Some(a),
        Err(_) => match token.to_uppercase().parse::<Action>() {
            Ok(a) => {
                non_strict = true;
                Some(a)
            }
            Err(_) => {
                errors.push(GrammarError::InvalidDecision(token.to_string()));
                None
            }
        },
    });
    let justification = body(2).unwrap_or("").to_string();
    if spans[2].is_some() && justification.is_empty() {
        errors.push(GrammarError::EmptyField("justification".into()));
    }
    let question = body(3).map(str::to_string);
    if action == Some(Action::Ask) && spans[3].is_none() && !errors.iter().any(|e| matches!(e, GrammarError::MissingTag(t) | GrammarError::MisorderedTag(t) if t == PLANNER_TAGS[3])) {
        errors.push(GrammarError::MissingQuestion);
    }
    if action == Some(Action::Ask) {
        match question.as_deref() {
            Some("") => errors.push(GrammarError::EmptyField(PLANNER_TAGS[3].into())),
            Some(q) if !q.ends_with('?') => errors.push(GrammarError::QuestionWithoutMark),
            _ => {}
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(PlannerDecision {
        reasoning_steps: steps,
        action: action.expect("decision parsed when no errors"),
        justification,
        clarification_question: question.filter(|_| action == Some(Action::Ask)),
        raw: text.to_string(),
        non_strict,
        malformed: false,
        parse_errors: Vec::new(),
    })
}

fn fallback_decision(raw: String, errors: Vec<GrammarError>) -> PlannerDecision {
    PlannerDecision {
        reasoning_steps: Vec::new(),
        action: Action::Abstain,
        justification: "planner output could not be parsed".into(),
        clarification_question: None,
        raw,
        non_strict: false,
        malformed: true,
        parse_errors: errors,
    }
}

/// Asks the planner model for a decision. Unparseable output becomes a
/// flagged ABSTAIN, except an ASK whose only defect is a missing question,
/// which stays ASK so the ask agent can write the question.
pub fn plan(
    query: &str,
    state: &InformationState,
    history: &[HistoryEntry],
    context: &GraphContext,
    chat: &dyn ChatProvider,
    history_cap: usize,
) -> Result<PlannerDecision, ProviderError> {
    let known: Vec<String> = state.known_variables.iter().cloned().collect();
    let missing: Vec<String> = state.missing_variables.iter().cloned().collect();
    let user = render_user(
        query,
        &known,
        &missing,
        &context.lines(),
        history,
        history_cap,
    );
    let raw = chat.chat(
        &[
            ChatMessage::system(PLANNER_SYSTEM_PROMPT),
            ChatMessage::user(user),
        ],
        &Decoding::default(),
    )?;
    Ok(match parse_planner_output(&raw) {
        Ok(d) => d,
        Err(errors) if errors == [GrammarError::MissingQuestion] => {
            let mut errs = Vec::new();
            let steps = tag_body(&raw, "reasoning")
                .map(|b| reasoning_steps(b, &mut errs))
                .unwrap_or_default();
            PlannerDecision {
                reasoning_steps: steps,
                action: Action::Ask,
                justification: tag_body(&raw, "justification").unwrap_or("").to_string(),
                clarification_question: None,
                raw,
                non_strict: false,
                malformed: true,
                parse_errors: errors,
            }
        }
        Err(errors) => {
            log::warn!(
                "planner output rejected: {}",
                errors
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            );
            fallback_decision(raw, errors)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReply {
    pub text: String,
    /// A fallback produced the text (template, guard or refusal).
    pub fallback: bool,
}

/// Retrieval settings for the answer agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub k: usize,
    pub top_m: usize,
    pub alpha: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            k: 20,
            top_m: 5,
            alpha: 0.5,
        }
    }
}

pub const GROUNDING_FAILURE: &str =
    "I could not find any supporting passage for this question in the knowledge base, so I will not answer it.";

fn history_block(history: &[DialogueTurn], exchanges: usize) -> String {
    let start = history.len().saturating_sub(exchanges * 2);
    history[start..]
        .iter()
        .map(|t| match t.action_taken {
            None => format!("User: {}", t.query),
            Some(_) => format!("Assistant: {}", t.query),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Retrieves, reranks and compresses evidence, then asks the model to answer
/// from it alone. With no evidence it refuses without calling the model.
pub fn answer_agent(
    query: &str,
    history: &[DialogueTurn],
    index: &Index,
    providers: &Providers,
    params: &RetrievalParams,
) -> Result<AgentReply, RetrievalError> {
    let retrieved = hybrid_retrieve(
        index,
        providers.embedder.as_ref(),
        query,
        params.k,
        params.alpha,
    )?;
    let compressed = rerank_and_compress(
        index,
        providers.reranker.as_ref(),
        query,
        &retrieved.results,
        params.top_m,
    );
    if compressed.kept.is_empty() {
        return Ok(AgentReply {
            text: GROUNDING_FAILURE.to_string(),
            fallback: true,
        });
    }
    let blocks: Vec<String> = compressed
        .kept
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let chunk = &index.chunks[c.result.chunk];
            fill(
                ANSWER_SOURCE_BLOCK,
                &[
                    ("n", &(i + 1).to_string()),
                    ("source", chunk.source.as_str()),
                    ("granularity", chunk.granularity.as_str()),
                    ("chunk_text", &c.compressed_text),
                ],
            )
        })
        .collect();
    let head = fill(
        ANSWER_PROMPT_HEAD,
        &[
            ("history_block", &history_block(history, 3)),
            ("query", query.trim()),
        ],
    );
    let prompt = format!("{head}{}{ANSWER_PROMPT_TAIL}", blocks.join("\n"));
    let text = providers
        .chat
        .chat(&[ChatMessage::user(prompt)], &Decoding::default())?;
    let text = text.trim().to_string();
    if text.is_empty() {
        return Ok(AgentReply {
            text: GROUNDING_FAILURE.to_string(),
            fallback: true,
        });
    }
    Ok(AgentReply {
        text,
        fallback: false,
    })
}

/// Evidence signals, classifier label and gate verdict for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub query: String,
    pub signals: SignalVector,
    pub label: AnswerabilityLabel,
    pub classifier_degraded: bool,
    pub incompleteness: f64,
    pub rule: u8,
    pub action: Action,
    pub chunk_ids: Vec<String>,
    pub rerank_failed: bool,
}

/// Retrieves and reranks evidence, computes the signals, classifies
/// answerability and applies the hard gate.
pub fn gate_route(
    query: &str,
    state: &InformationState,
    index: &Index,
    providers: &Providers,
    params: &RetrievalParams,
    thresholds: &GateThresholds,
) -> Result<GateReport, AgentError> {
    let retrieved = hybrid_retrieve(
        index,
        providers.embedder.as_ref(),
        query,
        params.k,
        params.alpha,
    )?;
    let kept = rerank_and_compress(
        index,
        providers.reranker.as_ref(),
        query,
        &retrieved.results,
        params.top_m,
    );
    let scores: Vec<f64> = kept
        .kept
        .iter()
        .map(|c| c.result.rerank_score.unwrap_or(c.result.fused_score))
        .collect();
    let texts: Vec<&str> = kept
        .kept
        .iter()
        .map(|c| c.compressed_text.as_str())
        .collect();
    let embeddings: Vec<Embedding> = kept
        .kept
        .iter()
        .map(|c| index.embeddings[c.result.chunk].clone())
        .collect();
    let entities = providers.ner.ner(query)?;
    let signals = compute_signals(query, &scores, &texts, &embeddings, &entities);
    let class = classify_answerability(query, &texts.join("\n\n"), providers.chat.as_ref());
    let incompleteness = state.incompleteness();
    let outcome = hard_gate(&signals, incompleteness, class.label, thresholds);
    Ok(GateReport {
        query: query.to_string(),
        signals,
        label: class.label,
        classifier_degraded: class.degraded || class.unparseable,
        incompleteness,
        rule: outcome.rule,
        action: outcome.action,
        chunk_ids: kept
            .kept
            .iter()
            .map(|c| c.result.chunk_id.clone())
            .collect(),
        rerank_failed: kept.rerank_failed,
    })
}

/// Inputs shared by the ask and abstain agents.
pub struct AgentContext<'a> {
    pub query: &'a str,
    pub state: &'a InformationState,
    pub graph_context: &'a GraphContext,
    pub history: &'a [DialogueTurn],
}

/// Passes the planner's question through untouched when it has one.
/// Otherwise asks the model, appends a missing `?`, and replaces replies
/// under 10 characters with the anchor template.
pub fn ask_agent(
    decision: &PlannerDecision,
    ctx: &AgentContext<'_>,
    chat: &dyn ChatProvider,
    embedder: &dyn Embedder,
    anchor_threshold: f64,
) -> AgentReply {
    if let Some(q) = decision
        .clarification_question
        .as_deref()
        .filter(|q| !q.trim().is_empty())
    {
        return AgentReply {
            text: q.to_string(),
            fallback: false,
        };
    }
    let missing: Vec<String> = ctx.state.missing_variables.iter().cloned().collect();
    let known: Vec<String> = ctx.state.known_variables.iter().cloned().collect();
    let target = missing
        .first()
        .cloned()
        .or_else(|| ctx.graph_context.aliases().first().cloned())
        .unwrap_or_default();
    let template = || AgentReply {
        text: build_question(&target, &known, ctx.query, embedder, anchor_threshold),
        fallback: true,
    };
    let entities = ctx.graph_context.entities(5);
    let prompt = fill(
        ASK_PROMPT,
        &[
            ("history_block", &history_block(ctx.history, 3)),
            ("query", ctx.query.trim()),
            (
                "missing_str",
                &if missing.is_empty() {
                    "a detail needed to answer".to_string()
                } else {
                    missing.join(", ")
                },
            ),
            (
                "known_context",
                &if entities.is_empty() {
                    "none".to_string()
                } else {
                    entities.join(", ")
                },
            ),
        ],
    );
    let raw = match chat.chat(&[ChatMessage::user(prompt)], &Decoding::max_tokens(64)) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("ask agent chat failed: {e}");
            return template();
        }
    };
    let line = raw
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches('"')
        .to_string();
    if line.chars().count() < 10 {
        return template();
    }
    let text = if line.ends_with('?') {
        line
    } else {
        format!("{line}?")
    };
    AgentReply {
        text,
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainCause {
    TopicAbsent,
    NotRecoverable,
    QueryTooVague,
}

impl AbstainCause {
    /// No matched node means the topic is absent, unless the query has no
    /// content words at all. Matched but unanswerable is not recoverable.
    pub fn determine(query: &str, context: &GraphContext) -> Self {
        if content_terms(query).is_empty() {
            AbstainCause::QueryTooVague
        } else if context.matched_nodes.is_empty() {
            AbstainCause::TopicAbsent
        } else {
            AbstainCause::NotRecoverable
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AbstainCause::TopicAbsent => "topic_absent",
            AbstainCause::NotRecoverable => "not_recoverable",
            AbstainCause::QueryTooVague => "query_too_vague",
        }
    }
}

/// The refusal reason for each cause.
pub fn abstain_reason(cause: AbstainCause, query: &str, state: &InformationState) -> String {
    match cause {
        AbstainCause::TopicAbsent => {
            let topic = if state.known_variables.is_empty() {
                query_head(query).unwrap_or_else(|| query.trim().to_string())
            } else {
                state
                    .known_variables
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            format!("The topic '{topic}' is not covered by the knowledge base.")
        }
        AbstainCause::NotRecoverable => {
            let what = if state.missing_variables.is_empty() {
                "the requested detail".to_string()
            } else {
                state
                    .missing_variables
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            format!(
                "The knowledge base covers this topic, but the required information ({what}) is not recorded and cannot be supplied through clarification."
            )
        }
        AbstainCause::QueryTooVague => {
            "The query is too vague to identify what is being asked.".to_string()
        }
    }
}

/// Writes a refusal. Replies under 20 characters become a fixed sentence.
pub fn abstain_agent(
    query: &str,
    state: &InformationState,
    cause: AbstainCause,
    chat: &dyn ChatProvider,
) -> AgentReply {
    let reason = abstain_reason(cause, query, state);
    let resolved = state.resolved_variables();
    let note = if resolved.is_empty() {
        String::new()
    } else {
        format!("Already clarified by the user: {}.", resolved.join(", "))
    };
    let prompt = fill(
        ABSTAIN_PROMPT,
        &[
            ("history_note", &note),
            ("query", query.trim()),
            ("reason", &reason),
        ],
    );
    let fixed = || {
        AgentReply {
        text: format!("I'm unable to answer this query. {reason} You may want to consult a specialised source."),
        fallback: true,
    }
    };
    match chat.chat(&[ChatMessage::user(prompt)], &Decoding::max_tokens(128)) {
        Ok(t) if t.trim().chars().count() >= 20 => AgentReply {
            text: t.trim().to_string(),
            fallback: false,
        },
        Ok(_) => fixed(),
        Err(e) => {
            log::warn!("abstain agent chat failed: {e}");
            fixed()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    State(#[from] StateError),
}

impl AgentError {
    pub fn is_provider(&self) -> bool {
        matches!(
            self,
            AgentError::Provider(_)
                | AgentError::Retrieval(RetrievalError::Provider(_))
                | AgentError::State(StateError::Provider(_))
        )
    }
}

/// Read-only resources shared by sessions.
pub struct Engine {
    pub graph: KnowledgeGraph,
    pub nodes: NodeIndex,
    pub index: Index,
    pub providers: Providers,
    pub ft: FtParams,
    pub retrieval: RetrievalParams,
}

impl Engine {
    pub fn new(
        graph: KnowledgeGraph,
        index: Index,
        providers: Providers,
        ft: FtParams,
        retrieval: RetrievalParams,
    ) -> Result<Self, ProviderError> {
        let nodes = NodeIndex::build(&graph, providers.embedder.as_ref())?;
        Ok(Engine {
            graph,
            nodes,
            index,
            providers,
            ft,
            retrieval,
        })
    }

    pub fn context(
        &self,
        query: &str,
        state: &InformationState,
    ) -> Result<GraphContext, ProviderError> {
        let known: Vec<String> = state.known_variables.iter().cloned().collect();
        extract_context(
            query,
            &known,
            &self.graph,
            &self.nodes,
            self.providers.embedder.as_ref(),
            RequiresMode::Include,
            &self.ft,
        )
    }

    /// Plans and runs exactly one agent for `query` under `state`.
    pub fn decide_and_respond(
        &self,
        query: &str,
        state: &InformationState,
        entries: &[HistoryEntry],
        history: &[DialogueTurn],
    ) -> Result<RouteOutcome, AgentError> {
        let context = self.context(query, state)?;
        let decision = plan(
            query,
            state,
            entries,
            &context,
            self.providers.chat.as_ref(),
            self.ft.history_cap,
        )?;
        self.respond(decision, context, query, state, history)
    }

    /// Runs the agent for an already chosen action, e.g. one picked by the
    /// hard gate rather than the planner.
    pub fn respond_to_gate(
        &self,
        gate: &GateReport,
        state: &InformationState,
        history: &[DialogueTurn],
    ) -> Result<RouteOutcome, AgentError> {
        let context = self.context(&gate.query, state)?;
        let decision = PlannerDecision {
            reasoning_steps: Vec::new(),
            action: gate.action,
            justification: format!("hard gate rule {} fired", gate.rule),
            clarification_question: None,
            raw: String::new(),
            non_strict: false,
            malformed: false,
            parse_errors: Vec::new(),
        };
        self.respond(decision, context, &gate.query, state, history)
    }

    fn respond(
        &self,
        decision: PlannerDecision,
        context: GraphContext,
        query: &str,
        state: &InformationState,
        history: &[DialogueTurn],
    ) -> Result<RouteOutcome, AgentError> {
        let chat = self.providers.chat.as_ref();
        let mut cause = None;
        let reply = match decision.action {
            Action::Answer => answer_agent(
                query,
                history,
                &self.index,
                &self.providers,
                &self.retrieval,
            )?,
            Action::Ask => {
                let ctx = AgentContext {
                    query,
                    state,
                    graph_context: &context,
                    history,
                };
                ask_agent(
                    &decision,
                    &ctx,
                    chat,
                    self.providers.embedder.as_ref(),
                    self.ft.anchor_threshold,
                )
            }
            Action::Abstain => {
                let c = if decision.malformed {
                    AbstainCause::QueryTooVague
                } else {
                    AbstainCause::determine(query, &context)
                };
                cause = Some(c);
                abstain_agent(query, state, c, chat)
            }
        };
        Ok(RouteOutcome {
            action: decision.action,
            response: reply.text,
            fallback: reply.fallback,
            decision,
            context,
            cause,
            resolved: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub action: Action,
    pub response: String,
    pub fallback: bool,
    pub decision: PlannerDecision,
    pub context: GraphContext,
    pub cause: Option<AbstainCause>,
    /// Variable the user's input resolved before planning.
    pub resolved: Option<String>,
}

#[derive(Debug, Clone)]
struct PendingAsk {
    variable: String,
    query: String,
}

/// One user's dialogue. After an ASK the next input is taken as the reply:
/// the asked variable moves from missing to known and the original query
/// is planned again.
pub struct Session<'a> {
    engine: &'a Engine,
    pub history: Vec<DialogueTurn>,
    pub entries: Vec<HistoryEntry>,
    pub state: InformationState,
    pending: Option<PendingAsk>,
}

impl<'a> Session<'a> {
    pub fn new(engine: &'a Engine) -> Self {
        Self::with_state(engine, InformationState::default())
    }

    pub fn with_state(engine: &'a Engine, state: InformationState) -> Self {
        Session {
            engine,
            history: Vec::new(),
            entries: Vec::new(),
            state,
            pending: None,
        }
    }

    /// Variable awaiting the user's reply.
    pub fn pending_variable(&self) -> Option<&str> {
        self.pending.as_ref().map(|p| p.variable.as_str())
    }

    pub fn route(&mut self, input: &str) -> Result<RouteOutcome, AgentError> {
        let input = input.trim();
        if input.is_empty() {
            return Err(StateError::InvalidInput("empty input".into()).into());
        }
        let mut next = self.state.clone();
        let mut resolved = None;
        let query = match &self.pending {
            Some(p) => {
                next = next.update_state(&p.variable, input)?;
                resolved = Some(p.variable.clone());
                p.query.clone()
            }
            None => {
                for e in self.engine.providers.ner.ner(input)? {
                    let v = normalize_variable(&e.text);
                    if !next.missing_variables.contains(&v) {
                        next.known_variables.insert(v);
                    }
                }
                input.to_string()
            }
        };
        let mut entries = self.entries.clone();
        if let (Some(r), Some(last)) = (&resolved, entries.last_mut()) {
            last.resolved = Some(r.clone());
        }
        let mut outcome = self
            .engine
            .decide_and_respond(&query, &next, &entries, &self.history)?;
        outcome.resolved = resolved.clone();

        let asked = (outcome.action == Action::Ask)
            .then(|| pick_asked(&next, &outcome.response))
            .flatten();
        self.pending = asked.clone().map(|variable| PendingAsk {
            variable,
            query: query.clone(),
        });
        entries.push(HistoryEntry {
            turn: entries.len() + 1,
            query,
            action: outcome.action,
            asked,
            resolved: None,
        });
        self.history.push(DialogueTurn::user(input, resolved));
        self.history.push(DialogueTurn::system(
            outcome.response.clone(),
            outcome.action,
        ));
        next.turn = (self.history.len() / 2) as u32;
        self.entries = entries;
        self.state = next;
        Ok(outcome)
    }
}

/// Missing variable the question is about: the first one it names, else
/// the first missing.
fn pick_asked(state: &InformationState, question: &str) -> Option<String> {
    let q = question.to_lowercase();
    state
        .missing_variables
        .iter()
        .find(|m| q.contains(m.as_str()))
        .or_else(|| state.missing_variables.first())
        .cloned()
}

/// Deterministic stand-in for the chat model. Planner prompts get a
/// rule-based decision rendered with the finetuning templates; agent and
/// helper prompts get extractive replies.
pub struct RuleBasedChat {
    embedder: Arc<dyn Embedder>,
    params: FtParams,
}

impl RuleBasedChat {
    pub fn new(embedder: Arc<dyn Embedder>, params: FtParams) -> Self {
        RuleBasedChat { embedder, params }
    }

    /// Empty graph: ABSTAIN. Missing variables, or unresolved variable
    /// placeholders: ASK. Otherwise ANSWER.
    pub fn decide(user: &str) -> Action {
        let lines = context_lines(user);
        if lines.is_empty() {
            return Action::Abstain;
        }
        let missing = tag_list(user, "missing_variables");
        let resolved = tag_list(user, "resolved_variables");
        let placeholders = lines.iter().any(|(_, r, _)| r == REQUIRES);
        if !missing.is_empty() || (placeholders && resolved.is_empty()) {
            Action::Ask
        } else {
            Action::Answer
        }
    }

    fn planner_reply(&self, user: &str) -> String {
        let action = Self::decide(user);
        let query = tag_body(user, "query").unwrap_or("").to_string();
        let known = tag_list(user, "known_variables");
        let missing = tag_list(user, "missing_variables");
        let lines = context_lines(user);
        let mut matched: Vec<String> = Vec::new();
        let mut relations: Vec<String> = Vec::new();
        let mut aliases: Vec<String> = Vec::new();
        for (s, r, o) in &lines {
            if known.iter().any(|k| s.contains(k.as_str())) && !matched.contains(s) {
                matched.push(s.clone());
            }
            if !relations.contains(r) {
                relations.push(r.clone());
            }
            if o.starts_with("?unknown_") {
                aliases.push(o.clone());
            }
        }
        if matched.is_empty() {
            matched.extend(lines.first().map(|l| l.0.clone()));
        }
        let question = (action == Action::Ask).then(|| {
            let target = missing
                .first()
                .or(aliases.first())
                .cloned()
                .unwrap_or_default();
            build_question(
                &target,
                &known,
                &query,
                self.embedder.as_ref(),
                self.params.anchor_threshold,
            )
        });
        render_assistant(&AssistantFacts {
            action,
            query,
            known,
            missing,
            matched_nodes: matched,
            relations,
            lead_triple: lines.first().map(|(s, r, o)| format!("{s} | {r} | {o}")),
            aliases,
            failure_mode: FailureMode::InsufficientVariables,
            question,
        })
    }
}

fn after<'t>(text: &'t str, marker: &str) -> Option<&'t str> {
    text.find(marker).map(|i| &text[i + marker.len()..])
}

fn line_after<'t>(text: &'t str, marker: &str) -> &'t str {
    after(text, marker)
        .and_then(|r| r.lines().next())
        .unwrap_or("")
        .trim()
}

impl ChatProvider for RuleBasedChat {
    fn chat(
        &self,
        messages: &[ChatMessage],
        _decoding: &Decoding,
    ) -> Result<String, ProviderError> {
        let system = messages
            .iter()
            .find(|m| m.role == ChatRole::System)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if system == PLANNER_SYSTEM_PROMPT {
            return Ok(self.planner_reply(user));
        }
        if system == REWRITE_PROMPT {
            return Ok(line_after(user, "Query: ").to_string());
        }
        if system == DECOMPOSE_PROMPT {
            return Ok(line_after(user, "Question: ").to_string());
        }
        if system == VERIFY_PROMPT {
            return Ok("SUPPORTED".into());
        }
        if user.starts_with(CLASSIFIER_PROMPT) {
            let ctx = after(user, "Context:\n").unwrap_or("").trim_start();
            let label = if ctx.is_empty() || ctx.starts_with("(empty)") {
                "NOT_ANSWERABLE"
            } else {
                "ANSWERABLE"
            };
            return Ok(label.into());
        }
        if user.starts_with(&ANSWER_PROMPT_HEAD[..40]) {
            let first = after(user, "[Source 1 |")
                .and_then(|r| r.split_once('\n'))
                .map(|(_, body)| body)
                .unwrap_or("");
            let passage = first.split("\n\n").next().unwrap_or("").trim();
            return Ok(crate::text::split_sentences(passage)
                .first()
                .copied()
                .unwrap_or(passage)
                .to_string());
        }
        if user.starts_with(&ASK_PROMPT[..40]) {
            let missing = line_after(user, "Missing information: ");
            return Ok(format!("Could you tell me the {missing} you mean?"));
        }
        if user.starts_with(&ABSTAIN_PROMPT[..40]) {
            let reason = line_after(user, "Reason: ");
            return Ok(format!(
                "I cannot answer this from the available knowledge base. {reason}"
            ));
        }
        Ok(String::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ftdata::ContextTriple;
    use crate::providers::{HashEmbedder, LexiconNer, OverlapReranker, ScriptedChat};

    pub(crate) const GOLDEN_ASK: &str = "<reasoning>\nStep 1 — Query subject: album, release date.\n         Query asks: 'How did the album sell?'\nStep 2 — Graph search: matched KG nodes: 'album'.\n         Relations seen: requires. Variable placeholder nodes\n         indicate missing information; path cannot be completed.\nStep 3 — Variable check: Known: album, release date.\n         Required but absent from graph: 'sales performance'.\n         Failure mode: INSUFFICIENT_VARIABLES.\nStep 4 — Decision rationale: graph has partial connections but\n         cannot complete the reasoning path without: 'sales performance'.\n</reasoning>\n<decision> ASK </decision>\n<justification>\nRegarding album: could you specify sales performance?\n</justification>\n<clarification_question>\nRegarding album: could you specify sales performance?\n</clarification_question>";

    #[test]
    fn parses_golden_ask() {
        let d = parse_planner_output(GOLDEN_ASK).unwrap();
        assert_eq!(d.action, Action::Ask);
        assert_eq!(
            d.clarification_question.as_deref(),
            Some("Regarding album: could you specify sales performance?")
        );
        assert_eq!(d.reasoning_steps.len(), 4);
        assert!(d.reasoning_steps[0].starts_with("Query subject: album"));
        assert!(!d.non_strict);
    }

    #[test]
    fn grammar_errors() {
        let dup = GOLDEN_ASK.replace(
            "<decision> ASK </decision>",
            "<decision> ASK </decision>\n<decision> ASK </decision>",
        );
        assert_eq!(
            parse_planner_output(&dup).unwrap_err(),
            vec![GrammarError::MisorderedTag("decision".into())]
        );
        let lower = GOLDEN_ASK.replace("<decision> ASK </decision>", "<decision> ask </decision>");
        assert!(parse_planner_output(&lower).unwrap().non_strict);
        let bad = GOLDEN_ASK.replace("<decision> ASK </decision>", "<decision> MAYBE </decision>");
        assert_eq!(
            parse_planner_output(&bad).unwrap_err(),
            vec![GrammarError::InvalidDecision("MAYBE".into())]
        );
        let swapped = {
            let j = &GOLDEN_ASK[GOLDEN_ASK.find("<justification>").unwrap()
                ..GOLDEN_ASK.find("<clarification_question>").unwrap()];
            let d = "<decision> ASK </decision>\n";
            GOLDEN_ASK.replace(d, "").replace(j, &format!("{j}{d}"))
        };
        assert!(parse_planner_output(&swapped)
            .unwrap_err()
            .contains(&GrammarError::MisorderedTag("justification".into())));
        let no_q = GOLDEN_ASK
            .split("\n<clarification_question>")
            .next()
            .unwrap();
        assert_eq!(
            parse_planner_output(no_q).unwrap_err(),
            vec![GrammarError::MissingQuestion]
        );
    }

    #[test]
    fn every_tag_deletion_is_rejected() {
        for tag in PLANNER_TAGS {
            for t in [format!("<{tag}>"), format!("</{tag}>")] {
                let mutant = GOLDEN_ASK.replacen(&t, "", 1);
                assert!(
                    parse_planner_output(&mutant).is_err(),
                    "deleting {t} was accepted"
                );
            }
        }
    }

    fn state(known: &[&str], missing: &[&str]) -> InformationState {
        InformationState::from_parts(known.to_vec(), missing.to_vec())
    }

    #[test]
    fn plan_falls_back_to_abstain() {
        let chat = ScriptedChat::new().with_fallback(
            "<reasoning>\nStep 1 x\n</reasoning>\n<justification>\ny\n</justification>",
        );
        let d = plan(
            "q",
            &state(&[], &[]),
            &[],
            &GraphContext::default(),
            &chat,
            6,
        )
        .unwrap();
        assert_eq!(d.action, Action::Abstain);
        assert!(d.malformed);
        assert!(d
            .parse_errors
            .contains(&GrammarError::MissingTag("decision".into())));
    }

    #[test]
    fn plan_recovers_ask_without_question() {
        let no_q = GOLDEN_ASK
            .split("\n<clarification_question>")
            .next()
            .unwrap();
        let chat = ScriptedChat::new().with_fallback(no_q);
        let d = plan(
            "q",
            &state(&[], &[]),
            &[],
            &GraphContext::default(),
            &chat,
            6,
        )
        .unwrap();
        assert_eq!(
            (d.action, d.clarification_question.as_deref(), d.malformed),
            (Action::Ask, None, true)
        );
    }

    fn ctx() -> GraphContext {
        GraphContext {
            matched_nodes: vec![("album".into(), 0.8)],
            triples: vec![ContextTriple {
                subject: "album".into(),
                relation: "release".into(),
                object: "february 2005".into(),
                weight: 0.8,
                alias: None,
            }],
            includes_requires: false,
        }
    }

    #[test]
    fn ask_agent_passthrough_and_guards() {
        let s = state(&["album"], &["sales performance"]);
        let g = ctx();
        let actx = AgentContext {
            query: "How did the album sell?",
            state: &s,
            graph_context: &g,
            history: &[],
        };
        let emb = HashEmbedder::default();
        let mut d = parse_planner_output(GOLDEN_ASK).unwrap();
        let chat = ScriptedChat::new().with_fallback("what");
        assert_eq!(
            ask_agent(&d, &actx, &chat, &emb, 0.2).text,
            "Regarding album: could you specify sales performance?"
        );
        d.clarification_question = None;
        let r = ask_agent(&d, &actx, &chat, &emb, 0.2);
        assert!(r.fallback);
        assert_eq!(
            r.text,
            "Regarding album: could you specify sales performance?"
        );
        let chat = ScriptedChat::new().with_fallback("Which region's sales do you mean");
        assert_eq!(
            ask_agent(&d, &actx, &chat, &emb, 0.2).text,
            "Which region's sales do you mean?"
        );
        let prompt = &chat.prompts()[0];
        assert!(prompt.contains("Missing information: sales performance"));
        assert!(prompt.contains("Known context: album, february 2005"));
    }

    #[test]
    fn abstain_agent_guard_and_causes() {
        let s = state(&["album"], &["sales performance"])
            .update_state("sales performance", "in Japan")
            .unwrap();
        let chat = ScriptedChat::new().with_fallback("Sorry");
        let r = abstain_agent(
            "How did the album sell?",
            &s,
            AbstainCause::TopicAbsent,
            &chat,
        );
        assert!(r.fallback);
        assert_eq!(
            r.text,
            "I'm unable to answer this query. The topic 'album, sales performance' is not covered by the knowledge base. You may want to consult a specialised source."
        );
        assert!(chat.prompts()[0].contains("Already clarified by the user: sales performance."));
        assert_eq!(
            AbstainCause::determine("weather in lisbon", &GraphContext::default()),
            AbstainCause::TopicAbsent
        );
        assert_eq!(
            AbstainCause::determine("is it?", &GraphContext::default()),
            AbstainCause::QueryTooVague
        );
        assert_eq!(
            AbstainCause::determine("album sales", &ctx()),
            AbstainCause::NotRecoverable
        );
    }

    fn providers(chat: Arc<dyn ChatProvider>) -> Providers {
        Providers {
            chat,
            embedder: Arc::new(HashEmbedder::default()),
            ner: Arc::new(LexiconNer::default()),
            reranker: Arc::new(OverlapReranker::default()),
        }
    }

    #[test]
    fn answer_agent_refuses_on_empty_index() {
        let chat = Arc::new(ScriptedChat::new().with_fallback("made up"));
        let p = providers(chat.clone());
        let r = answer_agent("q", &[], &Index::empty(), &p, &RetrievalParams::default()).unwrap();
        assert_eq!(r.text, GROUNDING_FAILURE);
        assert!(chat.prompts().is_empty());
    }

    #[test]
    fn answer_prompt_has_source_blocks() {
        use crate::retrieval::{chunk_document, Bm25Params};
        use crate::sample::{ContextDocument, Source};
        let doc = ContextDocument::whole("d1", "Silent Alarm was released in February 2005.");
        let emb = HashEmbedder::default();
        let index = Index::build(
            chunk_document(&doc, Source::Quac, false),
            &emb,
            Bm25Params::default(),
        )
        .unwrap();
        let chat = Arc::new(ScriptedChat::new().with_fallback("February 2005."));
        let r = answer_agent(
            "When was Silent Alarm released?",
            &[],
            &index,
            &providers(chat.clone()),
            &RetrievalParams::default(),
        )
        .unwrap();
        assert_eq!(r.text, "February 2005.");
        let prompt = &chat.prompts()[0];
        assert!(prompt.contains(
            "[Source 1 | quac | coarse]\nSilent Alarm was released in February 2005.\n\nAnswer:"
        ));
        assert!(prompt.starts_with("[user]\nYou are a knowledgeable assistant."));
    }

    #[test]
    fn rule_based_planner_output_parses() {
        let chat = RuleBasedChat::new(Arc::new(HashEmbedder::default()), FtParams::default());
        let s = state(&["album"], &["sales performance"]);
        let d = plan("How did the album sell?", &s, &[], &ctx(), &chat, 6).unwrap();
        assert_eq!(d.action, Action::Ask);
        assert!(!d.malformed);
        let d = plan(
            "How did the album sell?",
            &state(&["album"], &[]),
            &[],
            &ctx(),
            &chat,
            6,
        )
        .unwrap();
        assert_eq!(d.action, Action::Answer);
        let d = plan(
            "weather?",
            &state(&[], &[]),
            &[],
            &GraphContext::default(),
            &chat,
            6,
        )
        .unwrap();
        assert_eq!(d.action, Action::Abstain);
    }
}
