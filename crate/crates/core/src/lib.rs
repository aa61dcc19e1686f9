//! Deterministic multi-agent calendar scheduling: scenario generation, an
//! exact oracle, a turn-based negotiation engine, reference protocols, and
//! the metrics used to score runs.

pub mod domain;
pub mod engine;
pub mod metrics;
pub mod oracle;
pub mod protocols;
pub mod scenario;
pub mod suite;
pub mod trace;
pub mod vps;
