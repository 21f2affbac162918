//! Phase 1: entity-relation triples from chunk text.
//!
//! Triples come from a rule cascade over adjacent entity pairs within one
//! sentence. The tokens between the two entities must contain a verb from
//! the pattern table; the verb may be followed by a single preposition
//! (prepositional chain) or nothing (direct SVO). `X was <verb>ed by Y` is
//! read as the active `Y <verb> X`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{KgEdge, KgNode, KgParams, KnowledgeGraph};
use crate::providers::{EntityCategory, NerProvider};
use crate::retrieval::Chunk;
use crate::sample::Source;
use crate::text::{char_slice, normalize_variable, split_sentences, tokenize};

const REGULAR_VERBS: &[&str] = &[
    "release",
    "found",
    "form",
    "record",
    "produce",
    "direct",
    "sign",
    "join",
    "play",
    "marry",
    "create",
    "publish",
    "own",
    "acquire",
    "employ",
    "pay",
    "require",
    "include",
    "provide",
    "locate",
    "base",
    "manage",
    "study",
    "graduate",
    "live",
    "die",
    "serve",
    "represent",
    "star",
    "perform",
    "tour",
    "debut",
    "attend",
    "establish",
    "launch",
    "design",
    "invent",
    "discover",
    "develop",
    "compose",
    "name",
    "call",
    "belong",
    "grant",
    "disclose",
    "terminate",
    "govern",
    "receive",
    "defeat",
    "succeed",
    "replace",
    "host",
    "sponsor",
    "support",
    "feature",
    "contain",
    "share",
    "sue",
    "hire",
    "fire",
    "owe",
    "entitle",
    "cover",
    "work",
    "open",
    "close",
    "visit",
    "move",
    "return",
    "follow",
    "precede",
    "influence",
    "inspire",
    "compete",
    "merge",
    "partner",
    "collaborate",
    "protect",
    "restrict",
    "prohibit",
    "permit",
    "allow",
    "obligate",
    "assign",
    "transfer",
    "license",
    "notify",
    "reside",
    "settle",
    "emigrate",
    "immigrate",
    "operate",
    "head",
    "chair",
    "coach",
    "captain",
    "score",
    "appear",
    "premiere",
    "air",
    "broadcast",
    "nominate",
    "award",
    "elect",
    "appoint",
    "educate",
    "train",
    "adapt",
    "translate",
    "remix",
    "produce",
    "engineer",
    "mix",
    "master",
    "distribute",
    "market",
    "list",
    "rank",
    "top",
    "chart",
    "reach",
    "peak",
];

const IRREGULAR_VERBS: &[(&str, &str)] = &[
    ("won", "win"),
    ("win", "win"),
    ("wins", "win"),
    ("winning", "win"),
    ("wrote", "write"),
    ("written", "write"),
    ("write", "write"),
    ("writes", "write"),
    ("led", "lead"),
    ("lead", "lead"),
    ("leads", "lead"),
    ("sold", "sell"),
    ("sell", "sell"),
    ("sells", "sell"),
    ("bought", "buy"),
    ("buy", "buy"),
    ("buys", "buy"),
    ("left", "leave"),
    ("leave", "leave"),
    ("leaves", "leave"),
    ("held", "hold"),
    ("hold", "hold"),
    ("holds", "hold"),
    ("built", "build"),
    ("build", "build"),
    ("builds", "build"),
    ("taught", "teach"),
    ("teach", "teach"),
    ("teaches", "teach"),
    ("sang", "sing"),
    ("sung", "sing"),
    ("sing", "sing"),
    ("sings", "sing"),
    ("born", "born"),
    ("began", "begin"),
    ("begun", "begin"),
    ("begin", "begin"),
    ("begins", "begin"),
    ("founded", "found"),
    ("founds", "found"),
    ("shot", "shoot"),
    ("drew", "draw"),
    ("drawn", "draw"),
    ("ran", "run"),
    ("run", "run"),
    ("met", "meet"),
    ("meet", "meet"),
    ("fought", "fight"),
    ("spoke", "speak"),
    ("spoken", "speak"),
    ("grew", "grow"),
    ("grown", "grow"),
    ("stole", "steal"),
    ("sent", "send"),
    ("sent", "send"),
    ("told", "tell"),
    ("found", "find"),
    // weak verbs
    ("is", "be"),
    ("are", "be"),
    ("was", "be"),
    ("were", "be"),
    ("be", "be"),
    ("been", "be"),
    ("being", "be"),
    ("has", "have"),
    ("have", "have"),
    ("had", "have"),
    ("having", "have"),
    ("does", "do"),
    ("did", "do"),
    ("do", "do"),
    ("done", "do"),
    ("made", "make"),
    ("make", "make"),
    ("makes", "make"),
    ("making", "make"),
    ("got", "get"),
    ("get", "get"),
    ("gets", "get"),
    ("gotten", "get"),
    ("became", "become"),
    ("become", "become"),
    ("becomes", "become"),
    ("went", "go"),
    ("go", "go"),
    ("goes", "go"),
    ("gone", "go"),
    ("took", "take"),
    ("take", "take"),
    ("takes", "take"),
    ("taken", "take"),
    ("said", "say"),
    ("say", "say"),
    ("says", "say"),
    ("gave", "give"),
    ("give", "give"),
    ("gives", "give"),
    ("given", "give"),
    ("came", "come"),
    ("come", "come"),
    ("comes", "come"),
    ("seems", "seem"),
    ("seemed", "seem"),
];

/// Verbs too generic to carry a relation on their own.
pub const WEAK_VERBS: &[&str] = &[
    "be", "have", "do", "make", "get", "become", "go", "take", "say", "give", "come", "seem",
];

const BE_FORMS: &[&str] = &["is", "are", "was", "were", "be", "been", "being"];

const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "by", "for", "with", "from", "to", "of", "into", "onto", "during", "under",
    "over", "between", "against", "through", "about", "after", "before", "near", "within",
    "across", "since", "as",
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "its", "their", "his", "her", "this", "that", "these", "those",
];

fn verb_table() -> &'static HashMap<String, String> {
    static TABLE: OnceLock<HashMap<String, String>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = HashMap::new();
        for &v in REGULAR_VERBS {
            let past = if v.ends_with('e') {
                format!("{v}d")
            } else if let Some(stem) = v
                .strip_suffix('y')
                .filter(|s| !s.ends_with(['a', 'e', 'o', 'u']))
            {
                format!("{stem}ied")
            } else {
                format!("{v}ed")
            };
            let third = if v.ends_with(['s', 'x']) || v.ends_with("sh") || v.ends_with("ch") {
                format!("{v}es")
            } else if let Some(stem) = v
                .strip_suffix('y')
                .filter(|s| !s.ends_with(['a', 'e', 'o', 'u']))
            {
                format!("{stem}ies")
            } else {
                format!("{v}s")
            };
            let ing = match v.strip_suffix('e') {
                Some(stem) if !v.ends_with("ee") => format!("{stem}ing"),
                _ => format!("{v}ing"),
            };
            for form in [v.to_string(), past, third, ing] {
                t.insert(form, v.to_string());
            }
        }
        for &(form, lemma) in IRREGULAR_VERBS {
            t.insert(form.to_string(), lemma.to_string());
        }
        t
    })
}

/// Lemma of a verb form known to the pattern table.
pub fn lemma(token: &str) -> Option<&'static str> {
    verb_table().get(token).map(String::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTriple {
    pub subject: String,
    pub subject_category: EntityCategory,
    pub relation: String,
    pub object: String,
    pub object_category: EntityCategory,
    pub sem: f64,
    pub weak: bool,
}

/// Reads one relation out of the words between two entities.
fn relation_between(between: &[String], max_gap: usize) -> Option<(String, bool, bool, bool)> {
    // (relation, prepositional, passive, weak)
    if between.is_empty() || between.len() > max_gap {
        return None;
    }
    let main = between.iter().rposition(|t| lemma(t).is_some())?;
    let lem = lemma(&between[main])?;
    let weak = WEAK_VERBS.contains(&lem);
    let after: Vec<&String> = between[main + 1..]
        .iter()
        .filter(|t| !DETERMINERS.contains(&t.as_str()))
        .collect();
    match after.as_slice() {
        [] => Some((lem.to_string(), false, false, weak)),
        [p] if p.as_str() == "by" && main > 0 && BE_FORMS.contains(&between[main - 1].as_str()) => {
            Some((lem.to_string(), false, true, weak))
        }
        [p] if PREPOSITIONS.contains(&p.as_str()) => {
            Some((format!("{lem} {p}"), true, false, weak))
        }
        _ => None,
    }
}

/// Triples from one sentence's entities (sorted, non-overlapping).
pub fn extract_triples(
    sentence: &str,
    entities: &[crate::providers::NamedEntity],
    params: &KgParams,
) -> Vec<RawTriple> {
    let mut out = Vec::new();
    for pair in entities.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let between = tokenize(&char_slice(sentence, a.end, b.start));
        let Some((relation, prep, passive, weak)) =
            relation_between(&between, params.max_gap_tokens)
        else {
            continue;
        };
        let (s, o) = if passive { (b, a) } else { (a, b) };
        let (subject, object) = (normalize_variable(&s.text), normalize_variable(&o.text));
        if subject == object {
            continue;
        }
        out.push(RawTriple {
            subject,
            subject_category: s.category,
            relation,
            object,
            object_category: o.category,
            sem: if prep {
                params.sem_prep
            } else {
                params.sem_svo
            },
            weak,
        });
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Phase1Report {
    pub chunks: usize,
    pub ner_failures: usize,
    pub triples: usize,
    pub weak_filtered: usize,
    pub isolated_pruned: usize,
}

struct ChunkExtraction {
    chunk_id: String,
    mentions: Vec<(String, EntityCategory)>,
    triples: Vec<RawTriple>,
    weak_filtered: usize,
    failed: bool,
}

fn extract_chunk(chunk: &Chunk, ner: &dyn NerProvider, params: &KgParams) -> ChunkExtraction {
    let mut ex = ChunkExtraction {
        chunk_id: chunk.chunk_id.clone(),
        mentions: Vec::new(),
        triples: Vec::new(),
        weak_filtered: 0,
        failed: false,
    };
    for sentence in split_sentences(&chunk.text) {
        let ents = match ner.ner(sentence) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("NER failed on chunk {}: {e}", chunk.chunk_id);
                return ChunkExtraction {
                    failed: true,
                    mentions: Vec::new(),
                    triples: Vec::new(),
                    ..ex
                };
            }
        };
        ex.mentions
            .extend(ents.iter().map(|e| (e.normalized(), e.category)));
        for t in extract_triples(sentence, &ents, params) {
            if t.weak && chunk.source != Source::HotpotQa {
                ex.weak_filtered += 1;
            } else {
                ex.triples.push(t);
            }
        }
    }
    ex
}

/// Builds G0: entity nodes and triples from every chunk. Extraction runs in
/// parallel; merging happens in chunk order so the result is deterministic.
pub fn extract_phase1(
    chunks: &[Chunk],
    ner: &dyn NerProvider,
    params: &KgParams,
) -> (KnowledgeGraph, Phase1Report) {
    let per_chunk: Vec<ChunkExtraction> = chunks
        .par_iter()
        .map(|c| extract_chunk(c, ner, params))
        .collect();
    let mut report = Phase1Report {
        chunks: chunks.len(),
        ..Default::default()
    };
    let mut g = KnowledgeGraph::default();
    let mut edge_at: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for ex in per_chunk {
        if ex.failed {
            report.ner_failures += 1;
            continue;
        }
        report.weak_filtered += ex.weak_filtered;
        report.triples += ex.triples.len();
        for (name, cat) in &ex.mentions {
            g.nodes
                .entry(name.clone())
                .or_insert_with(|| KgNode::entity(name, *cat));
            g.node_to_kbs
                .entry(name.clone())
                .or_default()
                .insert(ex.chunk_id.clone());
        }
        for t in ex.triples {
            g.nodes
                .entry(t.subject.clone())
                .or_insert_with(|| KgNode::entity(&t.subject, t.subject_category));
            g.nodes
                .entry(t.object.clone())
                .or_insert_with(|| KgNode::entity(&t.object, t.object_category));
            let key = (t.subject.clone(), t.relation.clone(), t.object.clone());
            let idx = *edge_at.entry(key).or_insert_with(|| {
                g.edges.push(KgEdge {
                    subject: t.subject.clone(),
                    relation: t.relation.clone(),
                    object: t.object.clone(),
                    sem: t.sem,
                    act: params.act_init,
                    weight: 0.0,
                    freq: 0,
                    source_chunks: BTreeSet::new(),
                });
                g.edges.len() - 1
            });
            let e = &mut g.edges[idx];
            e.sem = e.sem.max(t.sem);
            e.source_chunks.insert(ex.chunk_id.clone());
            e.freq = e.source_chunks.len() as u32;
        }
    }
    for e in &mut g.edges {
        e.weight = params.blend(e.sem, e.act);
    }
    report.isolated_pruned = g.prune_isolated();
    g.record_stats("G0");
    (g, report)
}
