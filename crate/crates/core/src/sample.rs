//! The canonical dataset record shared by every source.
//!
//! Field order in the structs is the serialized order, so a record written by
//! [`UnifiedSample::to_json_line`] is byte-stable across runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::state::{Action, InformationState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "quac")]
    Quac,
    #[serde(rename = "sharc")]
    Sharc,
    #[serde(rename = "hotpotqa")]
    HotpotQa,
    #[serde(rename = "contract_nli")]
    ContractNli,
}

impl Source {
    pub const ALL: [Source; 4] = [
        Source::Sharc,
        Source::Quac,
        Source::HotpotQa,
        Source::ContractNli,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Quac => "quac",
            Source::Sharc => "sharc",
            Source::HotpotQa => "hotpotqa",
            Source::ContractNli => "contract_nli",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        Source::ALL.into_iter().find(|src| src.as_str() == s)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub doc_id: String,
    pub text: String,
    pub url: Option<String>,
    pub file_name: Option<String>,
    pub chunk_idx: u32,
    pub total_chunks: u32,
    pub spans: Vec<[u64; 2]>,
}

impl ContextDocument {
    pub fn whole(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        ContextDocument {
            doc_id: doc_id.into(),
            text: text.into(),
            url: None,
            file_name: None,
            chunk_idx: 0,
            total_chunks: 1,
            spans: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleContext {
    pub documents: Vec<ContextDocument>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureMode {
    Complete,
    InsufficientVariables,
    MultiHopRequired,
}

impl FailureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::Complete => "COMPLETE",
            FailureMode::InsufficientVariables => "INSUFFICIENT_VARIABLES",
            FailureMode::MultiHopRequired => "MULTI_HOP_REQUIRED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    VeryHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completeness {
    Complete,
    Partial,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleState {
    pub known_variables: Vec<String>,
    pub missing_variables: Vec<String>,
    pub constraints: Vec<String>,
    pub failure_mode: FailureMode,
    pub difficulty: Difficulty,
    pub completeness: Completeness,
}

/// Per-source annotations. Every key is always serialized; keys that do not
/// apply to the record's source are `null`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SourceSpecific {
    pub sharc_answer: Option<String>,
    pub evidence_depth: Option<u32>,
    pub history_depth: Option<u32>,
    pub utterance_id: Option<String>,
    pub question_type: Option<String>,
    pub level: Option<String>,
    pub num_supporting_facts: Option<u32>,
    pub nli_choice: Option<String>,
    pub label_id: Option<String>,
    pub num_spans: Option<u32>,
    pub yesno: Option<String>,
    pub followup_flag: Option<String>,
}

/// Bookkeeping from the variable-population stage. Absent until that stage
/// has touched the record.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PopulationInfo {
    pub prompt_version: String,
    pub needs_review: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub source: Source,
    pub multi_turn: bool,
    pub turn_id: Option<u32>,
    pub dialogue_id: Option<String>,
    pub requires_reasoning: bool,
    pub num_missing_variables: u32,
    pub variable_types: Vec<String>,
    pub source_specific: SourceSpecific,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PopulationInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedSample {
    pub id: String,
    pub query: String,
    pub context: SampleContext,
    pub state: SampleState,
    pub action: Action,
    pub response: String,
    pub metadata: SampleMetadata,
}

impl UnifiedSample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> serde_json::Result<Self> {
        serde_json::from_str(line)
    }

    /// Unit used for dialogue-atomic sampling and splitting.
    pub fn dialogue_key(&self) -> String {
        match (&self.metadata.dialogue_id, self.metadata.multi_turn) {
            (Some(d), true) => format!("dlg:{d}"),
            _ => format!("id:{}", self.id),
        }
    }

    pub fn information_state(&self) -> InformationState {
        let mut s = InformationState::from_parts(
            &self.state.known_variables,
            &self.state.missing_variables,
        );
        s.constraints = self.state.constraints.clone();
        s
    }

    /// Re-derives the fields that are functions of the variable lists:
    /// missing count, failure mode, completeness, difficulty.
    pub fn refresh_derived_fields(&mut self) {
        if self.action == Action::Answer {
            self.state.missing_variables.clear();
        }
        self.metadata.num_missing_variables = self.state.missing_variables.len() as u32;
        self.state.failure_mode = derive_failure_mode(self);
        self.state.completeness = derive_completeness(&self.state);
        self.state.difficulty = derive_difficulty(self);
    }

    /// Violated record-level invariants, as human-readable messages with a
    /// JSON-path locator.
    pub fn invariant_violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.action == Action::Answer && !self.state.missing_variables.is_empty() {
            out.push((
                "$.state.missing_variables".to_string(),
                "ANSWER samples must have no missing variables".to_string(),
            ));
        }
        if self.state.failure_mode == FailureMode::Complete
            && !self.state.missing_variables.is_empty()
        {
            out.push((
                "$.state.failure_mode".to_string(),
                "COMPLETE samples must have no missing variables".to_string(),
            ));
        }
        if self.metadata.num_missing_variables as usize != self.state.missing_variables.len() {
            out.push((
                "$.metadata.num_missing_variables".to_string(),
                format!(
                    "expected {} (length of missing_variables), found {}",
                    self.state.missing_variables.len(),
                    self.metadata.num_missing_variables
                ),
            ));
        }
        out
    }
}

fn derive_failure_mode(sample: &UnifiedSample) -> FailureMode {
    let ss = &sample.metadata.source_specific;
    if sample.metadata.source == Source::HotpotQa && ss.question_type.as_deref() == Some("bridge") {
        return FailureMode::MultiHopRequired;
    }
    if sample.state.missing_variables.is_empty() && sample.action == Action::Answer {
        FailureMode::Complete
    } else {
        FailureMode::InsufficientVariables
    }
}

fn derive_completeness(state: &SampleState) -> Completeness {
    match (
        state.known_variables.is_empty(),
        state.missing_variables.is_empty(),
    ) {
        (_, true) => Completeness::Complete,
        (false, false) => Completeness::Partial,
        (true, false) => Completeness::Incomplete,
    }
}

fn derive_difficulty(sample: &UnifiedSample) -> Difficulty {
    if let Some(level) = sample.metadata.source_specific.level.as_deref() {
        return match level {
            "easy" => Difficulty::Easy,
            "medium" => Difficulty::Medium,
            _ => Difficulty::Hard,
        };
    }
    match sample.state.missing_variables.len() {
        0 => Difficulty::Easy,
        1 => Difficulty::Medium,
        2 => Difficulty::Hard,
        _ => Difficulty::VeryHard,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn sample(id: &str, action: Action, known: &[&str], missing: &[&str]) -> UnifiedSample {
        let mut s = UnifiedSample {
            id: id.to_string(),
            query: format!("query {id}"),
            context: SampleContext {
                documents: vec![ContextDocument::whole(format!("doc-{id}"), "Some text.")],
            },
            state: SampleState {
                known_variables: known.iter().map(|s| s.to_string()).collect(),
                missing_variables: missing.iter().map(|s| s.to_string()).collect(),
                constraints: vec![],
                failure_mode: FailureMode::Complete,
                difficulty: Difficulty::Easy,
                completeness: Completeness::Complete,
            },
            action,
            response: "r".into(),
            metadata: SampleMetadata {
                source: Source::Quac,
                multi_turn: false,
                turn_id: None,
                dialogue_id: None,
                requires_reasoning: false,
                num_missing_variables: 0,
                variable_types: vec![],
                source_specific: SourceSpecific::default(),
                population: None,
            },
        };
        s.refresh_derived_fields();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::sample;
    use super::*;

    #[test]
    fn null_source_specific_keys_are_serialized() {
        let s = sample("a", Action::Answer, &["x"], &[]);
        let line = s.to_json_line();
        assert!(line.contains("\"sharc_answer\":null"));
        assert!(line.contains("\"followup_flag\":null"));
        assert!(!line.contains("population"));
        let keys: Vec<String> = serde_json::from_str::<serde_json::Value>(&line)
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(
            keys,
            ["id", "query", "context", "state", "action", "response", "metadata"]
        );
    }

    #[test]
    fn derived_fields_follow_variables() {
        let s = sample("a", Action::Ask, &["pension plan"], &["employment type"]);
        assert_eq!(s.state.failure_mode, FailureMode::InsufficientVariables);
        assert_eq!(s.state.completeness, Completeness::Partial);
        assert_eq!(s.metadata.num_missing_variables, 1);
        let s = sample("b", Action::Answer, &[], &["leftover"]);
        assert!(s.state.missing_variables.is_empty());
        assert_eq!(s.state.failure_mode, FailureMode::Complete);
        assert!(s.invariant_violations().is_empty());
    }

    proptest::proptest! {
        #[test]
        fn json_line_round_trip(known in proptest::collection::vec("[a-z ]{1,8}", 0..4),
                                missing in proptest::collection::vec("[a-z]{1,8}", 0..3),
                                turn in proptest::option::of(0u32..9)) {
            let k: Vec<&str> = known.iter().map(|s| s.as_str()).collect();
            let m: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
            let mut s = sample("p", Action::Ask, &k, &m);
            s.metadata.turn_id = turn;
            let line = s.to_json_line();
            let back = UnifiedSample::from_json_line(&line).unwrap();
            proptest::prop_assert_eq!(&back, &s);
            proptest::prop_assert_eq!(back.to_json_line(), line);
        }
    }
}
