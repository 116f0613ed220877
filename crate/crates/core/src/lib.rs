//! Reference-free preference data pipeline for conversational query reformulation.
//!
//! Pseudo reference passages are retrieved from each turn's response (later
//! concatenated with a model-refined version of it), candidate reformulations
//! are ranked against them, and the ranking is exported as SFT and DPO data.

pub mod bounds_sim;
pub mod corpus;
pub mod error;
pub mod jsonl;
pub mod lm_client;
pub mod metrics;
pub mod pipeline;
pub mod preference;
pub mod pseudo_ref;
pub mod retriever;

pub use error::{Error, Result};
