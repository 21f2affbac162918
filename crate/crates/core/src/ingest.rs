//! Source dataset loading, label mapping into [`UnifiedSample`], dialogue
//! atomic balancing, and variable population.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::providers::{ChatMessage, ChatProvider, Decoding};
use crate::sample::{
    Completeness, ContextDocument, Difficulty, FailureMode, PopulationInfo, SampleContext,
    SampleMetadata, SampleState, Source, SourceSpecific, UnifiedSample,
};
use crate::state::Action;
use crate::text::normalize_variable;

/// Version stamped into every record the extraction prompt touched.
pub const EXTRACTION_PROMPT_VERSION: &str = "var-extract-v1";
pub const MAX_KNOWN_VARIABLES: usize = 5;
pub const CHECKPOINT_EVERY: usize = 50;
pub const DEFAULT_TURN_CAP: usize = 6;

const QUAC_NO_ANSWER: &str = "CANNOTANSWER";

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{field}: unsupported value {value:?}")]
    Convert { field: String, value: String },
    #[error("malformed {dataset} file: {message}")]
    Format { dataset: Source, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid balance targets: {0}")]
    Targets(String),
}

fn convert_err(field: &str, value: impl Into<String>) -> IngestError {
    IngestError::Convert {
        field: field.to_string(),
        value: value.into(),
    }
}

/// One raw record as it appears in the source dataset, flattened where the
/// published format nests several samples inside one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source: Source,
    pub raw: Value,
}

fn format_err(source: Source, message: impl Into<String>) -> IngestError {
    IngestError::Format {
        dataset: source,
        message: message.into(),
    }
}

fn parse_json(source: Source, content: &str) -> Result<Value, IngestError> {
    serde_json::from_str(content).map_err(|e| format_err(source, e.to_string()))
}

fn array<'a>(source: Source, v: &'a Value, what: &str) -> Result<&'a Vec<Value>, IngestError> {
    v.as_array()
        .ok_or_else(|| format_err(source, format!("{what} is not an array")))
}

/// Reads a dataset file in its published format.
pub fn load_source(source: Source, content: &str) -> Result<Vec<SourceRecord>, IngestError> {
    let v = parse_json(source, content)?;
    let wrap = |raw| SourceRecord { source, raw };
    match source {
        Source::Sharc | Source::HotpotQa => Ok(array(source, &v, "top level")?
            .iter()
            .cloned()
            .map(wrap)
            .collect()),
        Source::Quac => {
            let mut out = Vec::new();
            for article in array(source, &v["data"], "data")? {
                for para in array(source, &article["paragraphs"], "paragraphs")? {
                    let qas = array(source, &para["qas"], "qas")?;
                    for (turn, qa) in qas.iter().enumerate() {
                        out.push(wrap(json!({
                            "title": article["title"],
                            "section_title": article["section_title"],
                            "paragraph_id": para["id"],
                            "context": para["context"],
                            "turn_index": turn,
                            "qa": qa,
                        })));
                    }
                }
            }
            Ok(out)
        }
        Source::ContractNli => {
            let labels = v["labels"]
                .as_object()
                .ok_or_else(|| format_err(source, "labels is not an object"))?;
            let mut out = Vec::new();
            for doc in array(source, &v["documents"], "documents")? {
                let annotations = &doc["annotation_sets"][0]["annotations"];
                for (label_id, label) in labels {
                    out.push(wrap(json!({
                        "document": {
                            "id": doc["id"],
                            "file_name": doc["file_name"],
                            "url": doc["url"],
                            "text": doc["text"],
                            "spans": doc["spans"],
                        },
                        "label_id": label_id,
                        "hypothesis": label["hypothesis"],
                        "annotation": annotations[label_id.as_str()],
                    })));
                }
            }
            Ok(out)
        }
    }
}

fn str_field<'a>(v: &'a Value, path: &str) -> Result<&'a str, IngestError> {
    let mut cur = v;
    for key in path.split('.') {
        cur = &cur[key];
    }
    cur.as_str().ok_or_else(|| {
        convert_err(
            path,
            if cur.is_null() {
                "<missing>".to_string()
            } else {
                cur.to_string()
            },
        )
    })
}

fn opt_str(v: &Value) -> Option<String> {
    v.as_str().map(str::to_string)
}

fn clean_question(q: &str) -> String {
    normalize_variable(q.trim().trim_end_matches('?'))
}

fn base_sample(
    id: String,
    query: &str,
    documents: Vec<ContextDocument>,
    action: Action,
    response: String,
    source: Source,
) -> UnifiedSample {
    UnifiedSample {
        id,
        query: query.trim().to_string(),
        context: SampleContext { documents },
        state: SampleState {
            known_variables: Vec::new(),
            missing_variables: Vec::new(),
            constraints: Vec::new(),
            failure_mode: FailureMode::Complete,
            difficulty: Difficulty::Easy,
            completeness: Completeness::Complete,
        },
        action,
        response,
        metadata: SampleMetadata {
            source,
            multi_turn: false,
            turn_id: None,
            dialogue_id: None,
            requires_reasoning: false,
            num_missing_variables: 0,
            variable_types: Vec::new(),
            source_specific: SourceSpecific::default(),
            population: None,
        },
    }
}

/// Maps one raw record to the unified schema using the fixed label table.
pub fn convert(record: &SourceRecord) -> Result<UnifiedSample, IngestError> {
    let r = &record.raw;
    let mut s = match record.source {
        Source::Sharc => convert_sharc(r)?,
        Source::Quac => convert_quac(r)?,
        Source::HotpotQa => convert_hotpot(r)?,
        Source::ContractNli => convert_contract_nli(r)?,
    };
    s.refresh_derived_fields();
    Ok(s)
}

fn follow_ups(v: &Value) -> Vec<(String, String)> {
    v.as_array()
        .map(|a| {
            a.iter()
                .map(|t| {
                    (
                        t["follow_up_question"].as_str().unwrap_or("").to_string(),
                        t["follow_up_answer"].as_str().unwrap_or("").to_string(),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

fn convert_sharc(r: &Value) -> Result<UnifiedSample, IngestError> {
    let utterance_id = str_field(r, "utterance_id")?;
    let answer = str_field(r, "answer")?.trim();
    let (action, label) = match answer {
        "Yes" | "No" => (Action::Answer, answer),
        "Irrelevant" => (Action::Abstain, answer),
        q if q.ends_with('?') => (Action::Ask, "Follow-on"),
        other => return Err(convert_err("answer", other)),
    };
    let history = follow_ups(&r["history"]);
    let evidence = follow_ups(&r["evidence"]);
    let mut doc = ContextDocument::whole(
        format!("sharc:{}", r["tree_id"].as_str().unwrap_or(utterance_id)),
        str_field(r, "snippet")?,
    );
    doc.url = opt_str(&r["source_url"]);
    let mut s = base_sample(
        format!("sharc:{utterance_id}"),
        str_field(r, "question")?,
        vec![doc],
        action,
        answer.to_string(),
        Source::Sharc,
    );
    let scenario = r["scenario"].as_str().unwrap_or("").trim();
    if !scenario.is_empty() {
        s.state.constraints.push(format!("scenario = {scenario}"));
    }
    for (q, a) in &history {
        let v = clean_question(q);
        s.state.constraints.push(format!("{v} = {a}"));
        s.state.known_variables.push(v);
    }
    if action == Action::Ask {
        let chain: Vec<String> = if evidence.is_empty() {
            vec![clean_question(answer)]
        } else {
            evidence.iter().map(|(q, _)| clean_question(q)).collect()
        };
        for v in chain {
            if !s.state.known_variables.contains(&v) && !s.state.missing_variables.contains(&v) {
                s.state.missing_variables.push(v);
            }
        }
    }
    s.metadata.multi_turn = !history.is_empty();
    s.metadata.turn_id = Some(history.len() as u32 + 1);
    s.metadata.dialogue_id = Some(utterance_id.to_string());
    s.metadata.requires_reasoning = !evidence.is_empty();
    let ss = &mut s.metadata.source_specific;
    ss.sharc_answer = Some(label.to_string());
    ss.evidence_depth = Some(evidence.len() as u32);
    ss.history_depth = Some(history.len() as u32);
    ss.utterance_id = Some(utterance_id.to_string());
    Ok(s)
}

fn convert_quac(r: &Value) -> Result<UnifiedSample, IngestError> {
    let qa = &r["qa"];
    let qid = str_field(qa, "id")?;
    let answer = qa["orig_answer"]["text"]
        .as_str()
        .or_else(|| qa["answers"][0]["text"].as_str())
        .ok_or_else(|| convert_err("qa.orig_answer.text", "<missing>"))?;
    let followup = str_field(qa, "followup")?;
    let yesno = qa["yesno"].as_str().unwrap_or("x");
    if !matches!(followup, "y" | "n" | "m") {
        return Err(convert_err("qa.followup", followup));
    }
    if !matches!(yesno, "y" | "n" | "x") {
        return Err(convert_err("qa.yesno", yesno));
    }
    // unanswerable dominates a follow-up flag
    let action = if answer == QUAC_NO_ANSWER {
        Action::Abstain
    } else if followup == "y" {
        Action::Ask
    } else {
        Action::Answer
    };
    let paragraph_id = str_field(r, "paragraph_id")?;
    let raw_context = str_field(r, "context")?;
    let text = raw_context
        .trim_end()
        .strip_suffix(QUAC_NO_ANSWER)
        .unwrap_or(raw_context)
        .trim_end();
    let mut doc = ContextDocument::whole(format!("quac:{paragraph_id}"), text);
    if action != Action::Abstain {
        if let Some(start) = qa["orig_answer"]["answer_start"].as_u64() {
            doc.spans
                .push([start, start + answer.chars().count() as u64]);
        }
    }
    let turn = r["turn_index"].as_u64().unwrap_or(0) as u32;
    let mut s = base_sample(
        format!("quac:{qid}"),
        str_field(qa, "question")?,
        vec![doc],
        action,
        answer.to_string(),
        Source::Quac,
    );
    s.metadata.multi_turn = true;
    s.metadata.turn_id = Some(turn + 1);
    s.metadata.dialogue_id = Some(paragraph_id.to_string());
    let ss = &mut s.metadata.source_specific;
    ss.history_depth = Some(turn);
    ss.yesno = Some(yesno.to_string());
    ss.followup_flag = Some(followup.to_string());
    Ok(s)
}

fn convert_hotpot(r: &Value) -> Result<UnifiedSample, IngestError> {
    let id = str_field(r, "_id")?;
    let qtype = str_field(r, "type")?;
    if !matches!(qtype, "bridge" | "comparison") {
        return Err(convert_err("type", qtype));
    }
    let mut docs = Vec::new();
    for para in r["context"]
        .as_array()
        .ok_or_else(|| convert_err("context", "<missing>"))?
    {
        let title = para[0]
            .as_str()
            .ok_or_else(|| convert_err("context[].0", para[0].to_string()))?;
        let sentences: Vec<&str> = para[1]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        docs.push(ContextDocument::whole(
            format!("hotpotqa:{title}"),
            sentences.concat().trim().to_string(),
        ));
    }
    let mut s = base_sample(
        format!("hotpotqa:{id}"),
        str_field(r, "question")?,
        docs,
        Action::Answer,
        str_field(r, "answer")?.to_string(),
        Source::HotpotQa,
    );
    s.metadata.requires_reasoning = true;
    let ss = &mut s.metadata.source_specific;
    ss.question_type = Some(qtype.to_string());
    ss.level = opt_str(&r["level"]);
    ss.num_supporting_facts = r["supporting_facts"].as_array().map(|a| a.len() as u32);
    Ok(s)
}

fn convert_contract_nli(r: &Value) -> Result<UnifiedSample, IngestError> {
    let doc_id = r["document"]["id"]
        .as_u64()
        .map(|n| n.to_string())
        .or_else(|| opt_str(&r["document"]["id"]));
    let doc_id = doc_id.ok_or_else(|| convert_err("document.id", "<missing>"))?;
    let label_id = str_field(r, "label_id")?;
    let choice = str_field(r, "annotation.choice")?;
    let action = match choice {
        "Entailment" | "Contradiction" => Action::Answer,
        "NotMentioned" => Action::Abstain,
        other => return Err(convert_err("annotation.choice", other)),
    };
    let text = str_field(r, "document.text")?;
    let all_spans: Vec<[u64; 2]> = r["document"]["spans"]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(|p| Some([p[0].as_u64()?, p[1].as_u64()?]))
                .collect()
        })
        .unwrap_or_default();
    let picked: Vec<usize> = r["annotation"]["spans"]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(|i| i.as_u64().map(|i| i as usize))
                .collect()
        })
        .unwrap_or_default();
    let mut doc = ContextDocument::whole(format!("contract_nli:{doc_id}"), text);
    doc.file_name = opt_str(&r["document"]["file_name"]);
    doc.url = opt_str(&r["document"]["url"]);
    doc.spans = picked
        .iter()
        .filter_map(|&i| all_spans.get(i).copied())
        .collect();
    let mut s = base_sample(
        format!("contract_nli:{doc_id}:{label_id}"),
        str_field(r, "hypothesis")?,
        vec![doc],
        action,
        choice.to_string(),
        Source::ContractNli,
    );
    let ss = &mut s.metadata.source_specific;
    ss.nli_choice = Some(choice.to_string());
    ss.label_id = Some(label_id.to_string());
    ss.num_spans = Some(picked.len() as u32);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceTargets {
    pub answer_frac: f64,
    pub ask_frac: f64,
    pub abstain_frac: f64,
    /// Minimum sample counts per source, filled before the action targets.
    #[serde(default)]
    pub source_minimums: BTreeMap<Source, usize>,
    /// Desired output size; defaults to the pool size.
    #[serde(default)]
    pub total: Option<usize>,
    #[serde(default = "default_turn_cap")]
    pub turn_cap: usize,
}

fn default_turn_cap() -> usize {
    DEFAULT_TURN_CAP
}

impl Default for BalanceTargets {
    fn default() -> Self {
        BalanceTargets {
            answer_frac: 0.33,
            ask_frac: 0.37,
            abstain_frac: 0.30,
            source_minimums: BTreeMap::new(),
            total: None,
            turn_cap: DEFAULT_TURN_CAP,
        }
    }
}

impl BalanceTargets {
    pub fn validate(&self) -> Result<(), IngestError> {
        let f = self.fractions();
        if f.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(IngestError::Targets(
                "each fraction must lie in (0, 1)".into(),
            ));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(IngestError::Targets(format!(
                "fractions sum to {}, not 1",
                f.iter().sum::<f64>()
            )));
        }
        if self.turn_cap == 0 {
            return Err(IngestError::Targets("turn_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.answer_frac, self.ask_frac, self.abstain_frac]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub target_total: usize,
    pub selected: usize,
    pub dialogues: usize,
    pub capped_dialogues: usize,
    pub achieved_counts: BTreeMap<String, usize>,
    pub achieved_fractions: BTreeMap<String, f64>,
    /// Samples missing to reach each action quota.
    pub shortfall: BTreeMap<String, usize>,
    pub source_counts: BTreeMap<String, usize>,
    pub source_shortfall: BTreeMap<String, usize>,
}

const ACTIONS: [Action; 3] = [Action::Answer, Action::Ask, Action::Abstain];

/// Samples a dialogue-atomic subset approaching the target action mix.
///
/// Dialogues are cut to their first `turn_cap` turns and shuffled with a
/// seeded stream after sorting, so the result does not depend on input
/// order. Source minimums are filled first; then a dialogue is added only
/// if it keeps every action within its quota.
pub fn balance(
    samples: &[UnifiedSample],
    targets: &BalanceTargets,
    seed: u64,
) -> Result<(Vec<UnifiedSample>, BalanceReport), IngestError> {
    targets.validate()?;
    let mut groups: BTreeMap<String, Vec<&UnifiedSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.dialogue_key()).or_default().push(s);
    }
    let mut report = BalanceReport::default();
    let mut units: Vec<(String, Vec<&UnifiedSample>)> = groups
        .into_iter()
        .map(|(k, mut turns)| {
            turns.sort_by(|a, b| {
                a.metadata
                    .turn_id
                    .cmp(&b.metadata.turn_id)
                    .then_with(|| a.id.cmp(&b.id))
            });
            if turns.len() > targets.turn_cap {
                turns.truncate(targets.turn_cap);
                report.capped_dialogues += 1;
            }
            (k, turns)
        })
        .collect();
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let pool: usize = units.iter().map(|(_, t)| t.len()).sum();
    let total = targets.total.unwrap_or(pool);
    let quota: Vec<f64> = targets
        .fractions()
        .iter()
        .map(|f| f * total as f64)
        .collect();
    let counts_of = |turns: &[&UnifiedSample]| {
        let mut c = [0usize; 3];
        for t in turns {
            c[t.action.index()] += 1;
        }
        c
    };
    let mut taken = vec![false; units.len()];
    let mut have = [0usize; 3];
    let mut per_source: BTreeMap<Source, usize> = BTreeMap::new();

    for (&src, &min) in &targets.source_minimums {
        for (i, (_, turns)) in units.iter().enumerate() {
            if per_source.get(&src).copied().unwrap_or(0) >= min {
                break;
            }
            if taken[i] || turns[0].metadata.source != src {
                continue;
            }
            taken[i] = true;
            let c = counts_of(turns);
            for a in 0..3 {
                have[a] += c[a];
            }
            *per_source.entry(src).or_default() += turns.len();
        }
    }
    for (i, (_, turns)) in units.iter().enumerate() {
        if have.iter().sum::<usize>() >= total {
            break;
        }
        if taken[i] {
            continue;
        }
        let c = counts_of(turns);
        if (0..3).all(|a| c[a] == 0 || (have[a] + c[a]) as f64 <= quota[a].ceil()) {
            taken[i] = true;
            for a in 0..3 {
                have[a] += c[a];
            }
            *per_source.entry(turns[0].metadata.source).or_default() += turns.len();
        }
    }

    let mut out: Vec<UnifiedSample> = Vec::new();
    for (i, (_, turns)) in units.iter().enumerate() {
        if taken[i] {
            report.dialogues += 1;
            out.extend(turns.iter().map(|s| (*s).clone()));
        }
    }
    out.sort_by(|a, b| {
        a.dialogue_key()
            .cmp(&b.dialogue_key())
            .then_with(|| a.metadata.turn_id.cmp(&b.metadata.turn_id))
            .then_with(|| a.id.cmp(&b.id))
    });
    report.target_total = total;
    report.selected = out.len();
    for a in ACTIONS {
        let n = have[a.index()];
        report.achieved_counts.insert(a.as_str().into(), n);
        report.achieved_fractions.insert(
            a.as_str().into(),
            if out.is_empty() {
                0.0
            } else {
                n as f64 / out.len() as f64
            },
        );
        let deficit = quota[a.index()].round() as usize;
        if n < deficit {
            report.shortfall.insert(a.as_str().into(), deficit - n);
        }
    }
    for (src, n) in &per_source {
        report.source_counts.insert(src.as_str().into(), *n);
    }
    for (src, min) in &targets.source_minimums {
        let n = per_source.get(src).copied().unwrap_or(0);
        if n < *min {
            report.source_shortfall.insert(src.as_str().into(), min - n);
        }
    }
    Ok((out, report))
}

pub const EXTRACTION_PROMPT: &str = "You annotate questions for a question-answering dataset.\n\
Given a query, its context and the action label, list:\n\
- known_variables: concrete entities or attributes stated in the query (at most 5)\n\
- missing_variables: information needed to resolve the query that the query does not give\n\
Samples labelled ANSWER have no missing variables.\n\
Reply with one JSON object: {\"known_variables\": [...], \"missing_variables\": [...]}";

#[derive(Deserialize)]
struct Extracted {
    #[serde(default)]
    known_variables: Vec<String>,
    #[serde(default)]
    missing_variables: Vec<String>,
}

fn parse_extraction(text: &str) -> Option<Extracted> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    serde_json::from_str(text.get(start..=end)?).ok()
}

fn dedup_normalized(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .map(|s| normalize_variable(&s))
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}

/// Fills the variable lists through the chat provider. ShARC records keep
/// their evidence-chain variables and make no call. ANSWER records always
/// end with an empty missing list. Unusable model output flags the record
/// for review instead of failing.
pub fn populate_variables(sample: &UnifiedSample, chat: &dyn ChatProvider) -> UnifiedSample {
    let mut s = sample.clone();
    if s.metadata.source == Source::Sharc {
        s.refresh_derived_fields();
        return s;
    }
    let context: String = s
        .context
        .documents
        .iter()
        .map(|d| d.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
        .chars()
        .take(2000)
        .collect();
    let user = format!(
        "Query: {}\nAction: {}\nContext:\n{context}\n\nJSON:",
        s.query,
        s.action.as_str()
    );
    let review = |s: &mut UnifiedSample, reason: String| {
        s.metadata.population = Some(PopulationInfo {
            prompt_version: EXTRACTION_PROMPT_VERSION.into(),
            needs_review: true,
            review_reason: Some(reason),
        });
    };
    match chat.chat(
        &[
            ChatMessage::system(EXTRACTION_PROMPT),
            ChatMessage::user(user),
        ],
        &Decoding::max_tokens(256),
    ) {
        Ok(out) => match parse_extraction(&out) {
            Some(x) => {
                let mut known = dedup_normalized(x.known_variables);
                known.truncate(MAX_KNOWN_VARIABLES);
                s.state.missing_variables = dedup_normalized(x.missing_variables)
                    .into_iter()
                    .filter(|m| !known.contains(m))
                    .collect();
                s.state.known_variables = known;
                s.metadata.population = Some(PopulationInfo {
                    prompt_version: EXTRACTION_PROMPT_VERSION.into(),
                    needs_review: false,
                    review_reason: None,
                });
            }
            None => review(&mut s, "unparseable extraction output".into()),
        },
        Err(e) => review(&mut s, format!("provider error: {e}")),
    }
    s.refresh_derived_fields();
    s
}

/// Populates every sample in batches of [`CHECKPOINT_EVERY`], appending each
/// finished batch to `checkpoint`. With `resume`, ids already in the
/// checkpoint are reused. Output keeps input order.
pub fn populate_batch(
    samples: &[UnifiedSample],
    chat: &dyn ChatProvider,
    checkpoint: Option<&Path>,
    resume: bool,
) -> Result<Vec<UnifiedSample>, IngestError> {
    let mut done: BTreeMap<String, UnifiedSample> = BTreeMap::new();
    if let (Some(path), true) = (checkpoint, resume) {
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                match UnifiedSample::from_json_line(&line) {
                    Ok(s) => {
                        done.insert(s.id.clone(), s);
                    }
                    // a crash can leave a torn final line
                    Err(e) => log::warn!("skipping unreadable checkpoint line: {e}"),
                }
            }
        }
    }
    let mut writer = match checkpoint {
        Some(path) => Some(
            OpenOptions::new()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(path)?,
        ),
        None => None,
    };
    let todo: Vec<&UnifiedSample> = samples
        .iter()
        .filter(|s| !done.contains_key(&s.id))
        .collect();
    for batch in todo.chunks(CHECKPOINT_EVERY) {
        let filled: Vec<UnifiedSample> = batch
            .par_iter()
            .map(|s| populate_variables(s, chat))
            .collect();
        if let Some(w) = writer.as_mut() {
            for s in &filled {
                writeln!(w, "{}", s.to_json_line())?;
            }
            w.flush()?;
        }
        done.extend(filled.into_iter().map(|s| (s.id.clone(), s)));
    }
    Ok(samples.iter().map(|s| done[&s.id].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub path: String,
    pub message: String,
}

const REQUIRED_FIELDS: [&str; 7] = [
    "id", "query", "context", "state", "action", "response", "metadata",
];

/// Parses and checks one JSONL record. Every problem is reported with a
/// JSON path.
pub fn validate(line: &str) -> Result<UnifiedSample, Vec<ValidationError>> {
    let err = |path: String, message: String| ValidationError { path, message };
    let value: Value =
        serde_json::from_str(line).map_err(|e| vec![err("$".into(), format!("not JSON: {e}"))])?;
    let Some(obj) = value.as_object() else {
        return Err(vec![err("$".into(), "record is not an object".into())]);
    };
    let missing: Vec<ValidationError> = REQUIRED_FIELDS
        .iter()
        .filter(|f| !obj.contains_key(**f))
        .map(|f| err(format!("$.{f}"), "required field is missing".into()))
        .collect();
    if !missing.is_empty() {
        return Err(missing);
    }
    let sample: UnifiedSample = serde_path_to_error::deserialize(&value).map_err(|e| {
        let path = e.path().to_string();
        vec![err(
            if path == "." {
                "$".into()
            } else {
                format!("$.{path}")
            },
            e.into_inner().to_string(),
        )]
    })?;
    let mut problems: Vec<ValidationError> = sample
        .invariant_violations()
        .into_iter()
        .map(|(p, m)| err(p, m))
        .collect();
    if sample.id.trim().is_empty() {
        problems.push(err("$.id".into(), "must not be empty".into()));
    }
    if sample.query.trim().is_empty() {
        problems.push(err("$.query".into(), "must not be empty".into()));
    }
    if problems.is_empty() {
        Ok(sample)
    } else {
        Err(problems)
    }
}

/// Ids that occur more than once.
pub fn duplicate_ids(samples: &[UnifiedSample]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dup: BTreeSet<String> = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            dup.insert(s.id.clone());
        }
    }
    dup.into_iter().collect()
}
