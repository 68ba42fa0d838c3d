//! Flow-level simulator for distributed Mixture-of-Experts training and
//! inference. Two mechanisms are modeled end to end: prioritized micro-op
//! communication scheduling in the training backward pass, and
//! popularity-estimation-driven expert placement with two-phase scheduling
//! in inference. The network is a fluid max-min fair-share model, so runs
//! are deterministic and take milliseconds instead of GPUs.

pub mod engine;
pub mod infersched;
pub mod netmodel;
pub mod trainsched;
pub mod types;
pub mod workload;

pub use types::{
    validate_spec, BatchAssignment, ClusterSpec, CollectiveKind, CollectiveOp, CollectivePayload,
    CostModel, DeviceId, ExpertId, InvalidSpec, ModelSpec, OpId, OpRecord, Scenario, SimReport,
};
