//! Decision-aware question answering: given a query, retrieved evidence and
//! a decision-weighted knowledge graph, route to ANSWER, ASK or ABSTAIN.

pub mod agents;
pub mod config;
pub mod decision;
pub mod eval;
pub mod ftdata;
pub mod ingest;
pub mod kg;
pub mod prompts;
pub mod providers;
pub mod retrieval;
pub mod sample;
pub mod state;
pub mod text;

pub use state::{Action, InformationState};
