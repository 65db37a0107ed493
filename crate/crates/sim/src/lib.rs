//! Deterministic simulation, trace checking and experiment harness for the
//! atomic broadcast replicas in `abcast-core`.

pub mod checker;
pub mod harness;
pub mod metrics;
pub mod scenario;
pub mod simnet;
pub mod trace;
