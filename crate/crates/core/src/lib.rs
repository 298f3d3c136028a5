//! Hybrid help-desk email triage.
//!
//! Incoming support mail is cleaned, assigned a region from the sender
//! address, and then handled by three escalating stages: a quick-fix intent
//! bot, sure-shot static keyword rules, and a threshold-gated cascade of
//! tree-ensemble classifiers. Anything the gate refuses lands in a manual
//! queue whose assignments become new training rows. Every routing step is
//! written to an append-only event log from which ticket and queue state is
//! rebuilt.

pub mod cascade;
pub mod classifiers;
pub mod corpus;
pub mod featurizer;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod quickfix;
pub mod router;
pub mod rules;
pub mod taxonomy;
