//! Pre-generation evidence signals and the priority-ordered hard gate.

use serde::{Deserialize, Serialize};

use crate::providers::{cosine, ChatMessage, ChatProvider, Decoding, Embedding, NamedEntity};
use crate::state::Action;
use crate::text::{content_terms, is_pronoun, is_stopword, tokenize, word_count};

/// Vague quantifiers for the ambiguity heuristic. Versioned with
/// [`crate::text::LEXICON_VERSION`].
pub const VAGUE_QUANTIFIERS: &[&str] = &[
    "some",
    "many",
    "few",
    "several",
    "much",
    "lots",
    "various",
    "numerous",
    "plenty",
    "most",
    "enough",
    "certain",
    "bunch",
    "couple",
    "handful",
    "somewhat",
    "something",
    "anything",
    "stuff",
    "things",
    "often",
    "sometimes",
    "usually",
];

/// Comparison cues. A query using one of these needs two things to compare.
pub const COMPARATIVE_CUES: &[&str] = &[
    "better",
    "worse",
    "best",
    "worst",
    "compare",
    "compared",
    "comparison",
    "versus",
    "vs",
    "difference",
    "differ",
    "bigger",
    "smaller",
    "larger",
    "older",
    "younger",
    "faster",
    "slower",
    "cheaper",
    "higher",
    "lower",
    "prefer",
    "preferable",
    "superior",
    "inferior",
];

const ARGUMENT_SEPARATORS: &[&str] = &["or", "and", "than", "vs", "versus", "between"];

pub const CONFLICT_TOP_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HeuristicHits {
    pub short_query: bool,
    pub dangling_pronoun: bool,
    pub vague_quantifier: bool,
    pub no_entity: bool,
    pub incomplete_comparison: bool,
}

impl HeuristicHits {
    pub fn as_array(&self) -> [bool; 5] {
        [
            self.short_query,
            self.dangling_pronoun,
            self.vague_quantifier,
            self.no_entity,
            self.incomplete_comparison,
        ]
    }

    pub fn count(&self) -> usize {
        self.as_array().iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalVector {
    pub confidence: f64,
    pub coverage: f64,
    pub ambiguity: f64,
    pub conflict: f64,
    pub answerability: f64,
    pub heuristic_hits: HeuristicHits,
    /// The query has no content terms, so coverage is meaningless.
    pub degenerate_query: bool,
}

impl SignalVector {
    pub fn new(
        confidence: f64,
        coverage: f64,
        hits: HeuristicHits,
        conflict: f64,
        degenerate_query: bool,
    ) -> Self {
        let ambiguity = hits.count() as f64 / 5.0;
        SignalVector {
            confidence,
            coverage,
            ambiguity,
            conflict,
            answerability: answerability(confidence, coverage, ambiguity, conflict),
            heuristic_hits: hits,
            degenerate_query,
        }
    }
}

pub fn confidence(rerank_scores: &[f64]) -> f64 {
    rerank_scores
        .iter()
        .copied()
        .fold(0.0, f64::max)
        .clamp(0.0, 1.0)
}

/// Share of the query's content terms found anywhere in `chunks`. The flag
/// is set when the query has no content terms (result 0).
pub fn coverage<S: AsRef<str>>(query: &str, chunks: &[S]) -> (f64, bool) {
    let q = content_terms(query);
    if q.is_empty() {
        return (0.0, true);
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in chunks {
        seen.extend(tokenize(c.as_ref()));
    }
    let hit = q.iter().filter(|t| seen.contains(*t)).count();
    (hit as f64 / q.len() as f64, false)
}

/// The five ambiguity heuristics and their mean.
pub fn ambiguity(query: &str, entities: &[NamedEntity]) -> (f64, HeuristicHits) {
    let tokens = tokenize(query);
    let hits = HeuristicHits {
        short_query: word_count(query) <= 4,
        dangling_pronoun: has_dangling_pronoun(&tokens),
        vague_quantifier: tokens
            .iter()
            .any(|t| VAGUE_QUANTIFIERS.contains(&t.as_str())),
        no_entity: entities.is_empty(),
        incomplete_comparison: has_incomplete_comparison(&tokens, entities),
    };
    (hits.count() as f64 / 5.0, hits)
}

/// A pronoun with no content word before it in the query.
fn has_dangling_pronoun(tokens: &[String]) -> bool {
    let mut seen_content = false;
    for t in tokens {
        if is_pronoun(t) && !seen_content {
            return true;
        }
        if !is_stopword(t) {
            seen_content = true;
        }
    }
    false
}

fn has_incomplete_comparison(tokens: &[String], entities: &[NamedEntity]) -> bool {
    if !tokens
        .iter()
        .any(|t| COMPARATIVE_CUES.contains(&t.as_str()))
    {
        return false;
    }
    if entities.len() >= 2 {
        return false;
    }
    // count separator-delimited segments that carry a non-cue content word
    let mut args = 0;
    let mut has_content = false;
    for t in tokens {
        if ARGUMENT_SEPARATORS.contains(&t.as_str()) {
            args += has_content as usize;
            has_content = false;
        } else if !is_stopword(t) && !COMPARATIVE_CUES.contains(&t.as_str()) && !is_question_word(t)
        {
            has_content = true;
        }
    }
    args += has_content as usize;
    args.max(entities.len()) < 2
}

fn is_question_word(t: &str) -> bool {
    matches!(
        t,
        "which"
            | "what"
            | "who"
            | "whom"
            | "whose"
            | "how"
            | "why"
            | "when"
            | "where"
            | "one"
            | "ones"
    )
}

/// `1 - mean pairwise cosine` over the first [`CONFLICT_TOP_K`] embeddings,
/// clamped to `[0, 1]`.
pub fn conflict(embeddings: &[Embedding]) -> f64 {
    let top = &embeddings[..embeddings.len().min(CONFLICT_TOP_K)];
    if top.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..top.len() {
        for j in i + 1..top.len() {
            sum += cosine(&top[i], &top[j]);
            pairs += 1;
        }
    }
    (1.0 - sum / pairs as f64).clamp(0.0, 1.0)
}

pub fn answerability(confidence: f64, coverage: f64, ambiguity: f64, conflict: f64) -> f64 {
    confidence * coverage * (1.0 - ambiguity) * (1.0 - conflict)
}

/// All signals for one query. `chunk_embeddings` should be in rank order.
pub fn compute_signals<S: AsRef<str>>(
    query: &str,
    rerank_scores: &[f64],
    chunks: &[S],
    chunk_embeddings: &[Embedding],
    entities: &[NamedEntity],
) -> SignalVector {
    let (cov, degenerate) = coverage(query, chunks);
    let (_, hits) = ambiguity(query, entities);
    SignalVector::new(
        confidence(rerank_scores),
        cov,
        hits,
        conflict(chunk_embeddings),
        degenerate,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerabilityLabel {
    Answerable,
    NeedsClarification,
    NotAnswerable,
}

impl AnswerabilityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerabilityLabel::Answerable => "ANSWERABLE",
            AnswerabilityLabel::NeedsClarification => "NEEDS_CLARIFICATION",
            AnswerabilityLabel::NotAnswerable => "NOT_ANSWERABLE",
        }
    }

    /// Finds the first label token in free text. `NOT_ANSWERABLE` is checked
    /// before its substring `ANSWERABLE`.
    pub fn parse(text: &str) -> Option<Self> {
        let upper = text.to_uppercase().replace([' ', '-'], "_");
        let positions = [
            (
                upper.find("NOT_ANSWERABLE"),
                AnswerabilityLabel::NotAnswerable,
            ),
            (
                upper.find("NEEDS_CLARIFICATION"),
                AnswerabilityLabel::NeedsClarification,
            ),
            (upper.find("ANSWERABLE"), AnswerabilityLabel::Answerable),
        ];
        let not_pos = positions[0].0;
        positions
            .into_iter()
            .filter_map(|(p, l)| p.map(|p| (p, l)))
            // the ANSWERABLE hit inside NOT_ANSWERABLE starts 4 bytes later
            .filter(|(p, l)| {
                !(*l == AnswerabilityLabel::Answerable && not_pos.is_some_and(|n| n + 4 == *p))
            })
            .min_by_key(|(p, _)| *p)
            .map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: AnswerabilityLabel,
    /// The provider call failed.
    pub degraded: bool,
    /// The model answered but no label could be read from it.
    pub unparseable: bool,
}

pub const CLASSIFIER_PROMPT: &str = "Decide whether the context below is sufficient to answer the query.\n\
Reply with exactly one label:\n\
ANSWERABLE - the context contains the answer\n\
NEEDS_CLARIFICATION - the context covers the topic but the query lacks a detail needed to pick the answer\n\
NOT_ANSWERABLE - the context does not contain the information\n";

pub fn classify_answerability(
    query: &str,
    context: &str,
    chat: &dyn ChatProvider,
) -> Classification {
    let user = format!(
        "{CLASSIFIER_PROMPT}\nQuery: {query}\n\nContext:\n{}\n\nLabel:",
        if context.trim().is_empty() {
            "(empty)"
        } else {
            context
        }
    );
    match chat.chat(&[ChatMessage::user(user)], &Decoding::max_tokens(16)) {
        Ok(out) => match AnswerabilityLabel::parse(&out) {
            Some(label) => Classification {
                label,
                degraded: false,
                unparseable: false,
            },
            None => Classification {
                label: AnswerabilityLabel::NeedsClarification,
                degraded: false,
                unparseable: true,
            },
        },
        Err(e) => {
            log::warn!("answerability classifier failed: {e}");
            Classification {
                label: AnswerabilityLabel::NeedsClarification,
                degraded: true,
                unparseable: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateThresholds {
    pub tau_conflict: f64,
    pub tau_conf: f64,
    pub tau_cov: f64,
    pub tau_amb: f64,
    /// Largest incompleteness still allowed to ANSWER.
    pub tau_i: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            tau_conflict: 0.70,
            tau_conf: 0.35,
            tau_cov: 0.30,
            tau_amb: 0.45,
            tau_i: 0.0,
        }
    }
}

impl GateThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            ("tau_conflict", self.tau_conflict),
            ("tau_conf", self.tau_conf),
            ("tau_cov", self.tau_cov),
            ("tau_amb", self.tau_amb),
            ("tau_i", self.tau_i),
        ];
        for (name, v) in all {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub action: Action,
    /// 1-based index of the rule that fired.
    pub rule: u8,
}

/// Priority-ordered gate; the first matching rule wins.
///
/// 1. conflict above threshold: ASK
/// 2. low confidence and low coverage: ABSTAIN (skipped for queries with no
///    content terms, whose coverage is undefined)
/// 3. high ambiguity: ASK
/// 4. classifier says not answerable: ABSTAIN
/// 5. classifier wants clarification: ASK
/// 6. ANSWER, or ASK when incompleteness exceeds `tau_i`
pub fn hard_gate(
    signals: &SignalVector,
    incompleteness: f64,
    label: AnswerabilityLabel,
    t: &GateThresholds,
) -> GateOutcome {
    let out = |action, rule| GateOutcome { action, rule };
    if signals.conflict > t.tau_conflict {
        return out(Action::Ask, 1);
    }
    if !signals.degenerate_query && signals.confidence < t.tau_conf && signals.coverage < t.tau_cov
    {
        return out(Action::Abstain, 2);
    }
    if signals.ambiguity > t.tau_amb {
        return out(Action::Ask, 3);
    }
    match label {
        AnswerabilityLabel::NotAnswerable => out(Action::Abstain, 4),
        AnswerabilityLabel::NeedsClarification => out(Action::Ask, 5),
        AnswerabilityLabel::Answerable if incompleteness > t.tau_i => out(Action::Ask, 6),
        AnswerabilityLabel::Answerable => out(Action::Answer, 6),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{EntityCategory, ScriptedChat};
    use proptest::prelude::*;

    fn ent(text: &str) -> NamedEntity {
        NamedEntity {
            text: text.into(),
            category: EntityCategory::Work,
            start: 0,
            end: text.chars().count(),
        }
    }

    fn sig(conf: f64, cov: f64, amb_hits: usize, conflict: f64) -> SignalVector {
        let mut hits = HeuristicHits::default();
        let flags = [
            &mut hits.short_query,
            &mut hits.dangling_pronoun,
            &mut hits.vague_quantifier,
            &mut hits.no_entity,
            &mut hits.incomplete_comparison,
        ];
        for f in flags.into_iter().take(amb_hits) {
            *f = true;
        }
        SignalVector::new(conf, cov, hits, conflict, false)
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.2, 0.9, 0.4]), 0.9);
        assert_eq!(confidence(&[]), 0.0);
        assert_eq!(confidence(&[0.5, 0.5]), 0.5);
    }

    #[test]
    fn coverage_examples() {
        let (c, _) = coverage("statutory redundancy pay", &["redundancy pay is due"]);
        assert!((c - 2.0 / 3.0).abs() < 1e-12);
        let (c, _) = coverage("redundancy pay", &["statutory redundancy pay rules"]);
        assert_eq!(c, 1.0);
        assert_eq!(coverage("what is it?", &["anything"]), (0.0, true));
    }

    #[test]
    fn ambiguity_examples() {
        let (a, h) = ambiguity("it?", &[]);
        assert!((a - 0.6).abs() < 1e-12);
        assert!(h.short_query && h.dangling_pronoun && h.no_entity && !h.vague_quantifier);
        let q = "Which band released the album Silent Alarm in February 2005?";
        let (a, _) = ambiguity(q, &[ent("Silent Alarm"), ent("February 2005")]);
        assert_eq!(a, 0.0);
        let (a, h) = ambiguity("which is better?", &[]);
        assert!((a - 0.6).abs() < 1e-12);
        assert!(h.short_query && h.no_entity && h.incomplete_comparison && !h.dangling_pronoun);
        let (_, h) = ambiguity("Is tea better than coffee for breakfast?", &[]);
        assert!(!h.incomplete_comparison);
    }

    #[test]
    fn conflict_examples() {
        let a = Embedding::normalized(vec![1.0, 0.0]);
        let b = Embedding::normalized(vec![0.0, 1.0]);
        assert_eq!(conflict(&[a.clone(), a.clone()]), 0.0);
        assert!((conflict(&[a.clone(), b.clone()]) - 1.0).abs() < 1e-12);
        assert_eq!(conflict(std::slice::from_ref(&a)), 0.0);
        let c = Embedding::normalized(vec![1.0, 1.0]);
        let expected = 1.0 - (cosine(&a, &b) + cosine(&a, &c) + cosine(&b, &c)) / 3.0;
        assert!((conflict(&[a, b, c]) - expected).abs() < 1e-12);
    }

    #[test]
    fn answerability_examples() {
        assert!((answerability(0.8, 0.75, 0.2, 0.1) - 0.432).abs() < 1e-12);
        assert_eq!(answerability(1.0, 1.0, 0.0, 0.0), 1.0);
        assert_eq!(answerability(0.0, 1.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn label_parsing() {
        assert_eq!(
            AnswerabilityLabel::parse("NOT_ANSWERABLE"),
            Some(AnswerabilityLabel::NotAnswerable)
        );
        assert_eq!(
            AnswerabilityLabel::parse("Label: answerable."),
            Some(AnswerabilityLabel::Answerable)
        );
        assert_eq!(
            AnswerabilityLabel::parse("not answerable"),
            Some(AnswerabilityLabel::NotAnswerable)
        );
        assert_eq!(
            AnswerabilityLabel::parse("needs clarification"),
            Some(AnswerabilityLabel::NeedsClarification)
        );
        assert_eq!(AnswerabilityLabel::parse("banana"), None);
    }

    #[test]
    fn classifier_fallbacks() {
        let chat = ScriptedChat::new().with_queue(["NOT_ANSWERABLE", "???", "ANSWERABLE"]);
        assert_eq!(
            classify_answerability("q", "c", &chat).label,
            AnswerabilityLabel::NotAnswerable
        );
        let c = classify_answerability("q", "c", &chat);
        assert_eq!(c.label, AnswerabilityLabel::NeedsClarification);
        assert!(c.unparseable);
        assert_eq!(
            classify_answerability("q", "c", &chat).label,
            AnswerabilityLabel::Answerable
        );
    }

    #[test]
    fn gate_examples() {
        let t = GateThresholds::default();
        let ok = AnswerabilityLabel::Answerable;
        assert_eq!(
            hard_gate(&sig(1.0, 1.0, 0, 0.8), 0.0, ok, &t),
            GateOutcome {
                action: Action::Ask,
                rule: 1
            }
        );
        assert_eq!(
            hard_gate(&sig(0.30, 0.25, 0, 0.0), 0.0, ok, &t),
            GateOutcome {
                action: Action::Abstain,
                rule: 2
            }
        );
        assert_eq!(
            hard_gate(&sig(0.9, 0.9, 0, 0.1), 0.0, ok, &t),
            GateOutcome {
                action: Action::Answer,
                rule: 6
            }
        );
        assert_eq!(
            hard_gate(&sig(0.9, 0.9, 0, 0.1), 0.5, ok, &t),
            GateOutcome {
                action: Action::Ask,
                rule: 6
            }
        );
        let mut degenerate = sig(0.0, 0.0, 3, 0.0);
        degenerate.degenerate_query = true;
        assert_eq!(
            hard_gate(&degenerate, 0.0, ok, &t),
            GateOutcome {
                action: Action::Ask,
                rule: 3
            }
        );
        // empty retrieval on a normal query abstains
        assert_eq!(hard_gate(&sig(0.0, 0.0, 3, 0.0), 0.0, ok, &t).rule, 2);
    }

    proptest! {
        #[test]
        fn ambiguity_is_multiple_of_fifth(q in "[a-z ?]{0,40}") {
            let (a, h) = ambiguity(&q, &[]);
            prop_assert!((a * 5.0 - h.count() as f64).abs() < 1e-12);
        }

        #[test]
        fn answerability_monotone(c in 0.0..1.0f64, v in 0.0..1.0f64, a in 0.0..1.0f64, k in 0.0..1.0f64, d in 0.0..0.5f64) {
            let base = answerability(c, v, a, k);
            prop_assert!(answerability((c + d).min(1.0), v, a, k) >= base - 1e-15);
            prop_assert!(answerability(c, (v + d).min(1.0), a, k) >= base - 1e-15);
            prop_assert!(answerability(c, v, (a + d).min(1.0), k) <= base + 1e-15);
            prop_assert!(answerability(c, v, a, (k + d).min(1.0)) <= base + 1e-15);
        }

        #[test]
        fn raising_conflict_never_leaves_ask(c in 0.0..1.0f64, v in 0.0..1.0f64, hits in 0usize..6,
                                             k in 0.0..1.0f64, d in 0.0..1.0f64, i in 0.0..1.0f64, l in 0usize..3) {
            let label = [AnswerabilityLabel::Answerable, AnswerabilityLabel::NeedsClarification, AnswerabilityLabel::NotAnswerable][l];
            let t = GateThresholds::default();
            let before = hard_gate(&sig(c, v, hits, k), i, label, &t);
            let after = hard_gate(&sig(c, v, hits, (k + d).min(1.0)), i, label, &t);
            if before.rule == 1 {
                prop_assert_eq!(after.rule, 1);
            }
            if after.action != before.action {
                prop_assert_eq!(after.action, Action::Ask);
                prop_assert_eq!(after.rule, 1);
            }
        }
    }
}
