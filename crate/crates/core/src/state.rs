//! The action space and the multi-turn information state.
//!
//! An [`InformationState`] tracks which variables a query already pins down,
//! which ones are still required, and the constraints collected so far. All
//! operations return new values; `update_state` is the only transition.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{NerProvider, ProviderError};
use crate::text::normalize_variable;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("state violation: {0}")]
    StateViolation(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// One of the three routing actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Answer,
    Ask,
    Abstain,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Answer, Action::Ask, Action::Abstain];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Answer => "ANSWER",
            Action::Ask => "ASK",
            Action::Abstain => "ABSTAIN",
        }
    }

    /// Position in the fixed ANSWER/ASK/ABSTAIN order.
    pub fn index(self) -> usize {
        match self {
            Action::Answer => 0,
            Action::Ask => 1,
            Action::Abstain => 2,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown action tag {0:?}")]
pub struct ParseActionError(pub String);

impl FromStr for Action {
    type Err = ParseActionError;

    /// Accepts exactly the three uppercase tags.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ANSWER" => Ok(Action::Answer),
            "ASK" => Ok(Action::Ask),
            "ABSTAIN" => Ok(Action::Abstain),
            other => Err(ParseActionError(other.to_string())),
        }
    }
}

/// Insertion-ordered set of normalized variable names.
pub type VarSet = IndexSet<String>;

/// Build a [`VarSet`] from raw strings, normalizing and dropping empties.
pub fn var_set<I, S>(items: I) -> VarSet
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    items
        .into_iter()
        .map(|s| normalize_variable(s.as_ref()))
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InformationState {
    pub known_variables: VarSet,
    pub missing_variables: VarSet,
    /// Resolved facts and dialogue context, in dialogue order.
    pub constraints: Vec<String>,
    pub turn: u32,
}

impl InformationState {
    /// Builds a state from explicit variable lists. Anything listed as both
    /// known and missing counts as known.
    pub fn from_parts<K, M, S1, S2>(known: K, missing: M) -> Self
    where
        K: IntoIterator<Item = S1>,
        M: IntoIterator<Item = S2>,
        S1: AsRef<str>,
        S2: AsRef<str>,
    {
        let known_variables = var_set(known);
        let missing_variables = var_set(missing)
            .into_iter()
            .filter(|v| !known_variables.contains(v))
            .collect();
        InformationState {
            known_variables,
            missing_variables,
            constraints: Vec::new(),
            turn: 0,
        }
    }

    /// Fraction of required variables still missing. A state with no
    /// variables at all is treated as complete.
    pub fn incompleteness(&self) -> f64 {
        let known = self.known_variables.len();
        let missing = self.missing_variables.len();
        if known + missing == 0 {
            return 0.0;
        }
        missing as f64 / (known + missing) as f64
    }

    pub fn resolution_rate(&self) -> f64 {
        1.0 - self.incompleteness()
    }

    /// Moves `asked_variable` from missing to known and records the user's
    /// reply as a constraint.
    pub fn update_state(&self, asked_variable: &str, user_reply: &str) -> Result<Self, StateError> {
        let var = normalize_variable(asked_variable);
        if !self.missing_variables.contains(&var) {
            return Err(StateError::StateViolation(format!(
                "variable {var:?} is not among the missing variables"
            )));
        }
        let mut next = self.clone();
        next.missing_variables.shift_remove(&var);
        next.known_variables.insert(var.clone());
        next.constraints
            .push(format!("{var} = {}", user_reply.trim()));
        next.turn += 1;
        Ok(next)
    }

    /// Variables resolved through clarification, recovered from the
    /// `variable = reply` constraints in order.
    pub fn resolved_variables(&self) -> Vec<String> {
        self.constraints
            .iter()
            .filter_map(|c| c.split_once(" = ").map(|(v, _)| v.to_string()))
            .collect()
    }
}

/// Initial state for a fresh query: known variables are the query's named
/// entities plus the retrieved entities, missing are the required variables
/// not already known.
pub fn init_state<S1, S2>(
    query: &str,
    retrieved_entities: &[S1],
    required_vars: &[S2],
    ner: &dyn NerProvider,
) -> Result<InformationState, StateError>
where
    S1: AsRef<str>,
    S2: AsRef<str>,
{
    if query.trim().is_empty() {
        return Err(StateError::InvalidInput("query must not be empty".into()));
    }
    let query_entities = ner.ner(query)?;
    let known = query_entities
        .iter()
        .map(|e| e.text.as_str())
        .chain(retrieved_entities.iter().map(|s| s.as_ref()));
    Ok(InformationState::from_parts(
        known.collect::<Vec<_>>(),
        required_vars.iter().map(|s| s.as_ref()).collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: Role,
    /// User text, or the system response for system turns.
    pub query: String,
    pub action_taken: Option<Action>,
    /// Set on the user turn that answers a preceding ASK.
    pub resolved_variable: Option<String>,
}

impl DialogueTurn {
    pub fn user(query: impl Into<String>, resolved_variable: Option<String>) -> Self {
        DialogueTurn {
            role: Role::User,
            query: query.into(),
            action_taken: None,
            resolved_variable,
        }
    }

    pub fn system(response: impl Into<String>, action: Action) -> Self {
        DialogueTurn {
            role: Role::System,
            query: response.into(),
            action_taken: Some(action),
            resolved_variable: None,
        }
    }
}

/// Checks that `resolved_variable` only appears on user turns directly after
/// an ASK system turn.
pub fn check_history(history: &[DialogueTurn]) -> Result<(), StateError> {
    for (i, turn) in history.iter().enumerate() {
        if turn
            .resolved_variable
            .as_deref()
            .is_some_and(|v| !v.is_empty())
        {
            let prev_ask = i > 0
                && history[i - 1].role == Role::System
                && history[i - 1].action_taken == Some(Action::Ask);
            if turn.role != Role::User || !prev_ask {
                return Err(StateError::StateViolation(format!(
                    "turn {i} resolves a variable without a preceding ASK"
                )));
            }
        }
    }
    Ok(())
}
