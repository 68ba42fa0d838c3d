//! Shared domain types: cluster and cost descriptions, communication ops,
//! batch routing and simulation reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Device index in `[0, num_devices)`.
pub type DeviceId = u32;
/// Expert index in `[0, experts_per_layer)`.
pub type ExpertId = u16;

/// Unique identifier for a communication op or micro-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId(pub u64);

impl std::fmt::Display for OpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "op{}", self.0)
    }
}

/// Cluster shape: a two-tier topology of nodes holding equal device counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_devices: u32,
    pub devices_per_node: u32,
    /// Inter-node NIC bandwidth, bytes/second.
    pub inter_node_bw: f64,
    /// Intra-node fabric bandwidth per device port, bytes/second.
    pub intra_node_bw: f64,
}

impl ClusterSpec {
    pub fn node_of(&self, device: DeviceId) -> u32 {
        device / self.devices_per_node
    }

    pub fn same_node(&self, a: DeviceId, b: DeviceId) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn devices(&self) -> impl Iterator<Item = DeviceId> {
        0..self.num_devices
    }

    fn violations(&self, out: &mut Vec<String>) {
        if self.num_devices == 0 {
            out.push("cluster: num_devices must be positive".into());
        }
        if self.devices_per_node == 0 {
            out.push("cluster: devices_per_node must be positive".into());
        } else if self.num_devices % self.devices_per_node != 0 {
            out.push(format!(
                "cluster: num_devices ({}) not divisible by devices_per_node ({})",
                self.num_devices, self.devices_per_node
            ));
        }
        if !(self.inter_node_bw > 0.0) {
            out.push("cluster: inter_node_bw must be > 0".into());
        }
        if !(self.intra_node_bw > 0.0) {
            out.push("cluster: intra_node_bw must be > 0".into());
        }
        if self.intra_node_bw < self.inter_node_bw {
            out.push("cluster: intra_node_bw must be >= inter_node_bw".into());
        }
    }
}

/// Per-token compute costs and fixed scheduling overheads, all in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub gate_cost_per_token: f64,
    pub ffn_cost_per_token: f64,
    pub combine_cost_per_token: f64,
    pub attention_cost_per_token: f64,
    /// Weight-swap cost when a device changes hosted experts.
    pub expert_swap_cost: f64,
    /// Full scheduling pass (phase one, or phase two with re-planning).
    pub sched_phase_cost: f64,
    /// Phase two when the estimate holds and only a resume signal is sent.
    pub resume_signal_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            gate_cost_per_token: 0.0,
            ffn_cost_per_token: 0.0,
            combine_cost_per_token: 0.0,
            attention_cost_per_token: 0.0,
            expert_swap_cost: 0.0,
            sched_phase_cost: 6.2e-3,
            resume_signal_cost: 1.45e-3,
        }
    }
}

impl CostModel {
    fn violations(&self, out: &mut Vec<String>) {
        let fields = [
            ("gate_cost_per_token", self.gate_cost_per_token),
            ("ffn_cost_per_token", self.ffn_cost_per_token),
            ("combine_cost_per_token", self.combine_cost_per_token),
            ("attention_cost_per_token", self.attention_cost_per_token),
            ("expert_swap_cost", self.expert_swap_cost),
            ("sched_phase_cost", self.sched_phase_cost),
            ("resume_signal_cost", self.resume_signal_cost),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                out.push(format!("cost: {name} must be >= 0"));
            }
        }
    }
}

/// Model shape: layer count, expert fan-out and the tensor sizes that drive
/// communication volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub experts_per_layer: u16,
    /// Bytes carried per token through an all-to-all.
    pub token_embedding_bytes: u64,
    /// Gradient tensor sizes emitted between consecutive MoE layers in the
    /// backward pass, in emission order.
    pub nonexpert_grad_bytes: Vec<u64>,
    pub gating_top_k: u16,
}

impl ModelSpec {
    fn violations(&self, out: &mut Vec<String>) {
        if self.num_layers == 0 {
            out.push("model: num_layers must be positive".into());
        }
        if self.experts_per_layer == 0 {
            out.push("model: experts_per_layer must be positive".into());
        }
        if self.gating_top_k == 0 {
            out.push("model: gating_top_k must be positive".into());
        }
        if self.gating_top_k > self.experts_per_layer {
            out.push(format!(
                "model: gating_top_k ({}) must be <= experts_per_layer ({})",
                self.gating_top_k, self.experts_per_layer
            ));
        }
        for (i, &g) in self.nonexpert_grad_bytes.iter().enumerate() {
            if g == 0 {
                out.push(format!("model: nonexpert_grad_bytes[{i}] must be > 0"));
            }
        }
    }
}

/// Priority class for communication scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorityClass {
    High,
    Low,
}

/// Kind tag used in timelines and demand computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllToAll,
    AllReduce,
    PointToPoint,
}

impl std::fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CollectiveKind::AllToAll => write!(f, "all_to_all"),
            CollectiveKind::AllReduce => write!(f, "all_reduce"),
            CollectiveKind::PointToPoint => write!(f, "point_to_point"),
        }
    }
}

/// Byte payload of a collective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CollectivePayload {
    /// Per ordered (source, destination) pair byte counts. Zero-byte pairs
    /// stand for placeholder pointers and are legal.
    AllToAll {
        per_pair_bytes: BTreeMap<(DeviceId, DeviceId), u64>,
    },
    /// One tensor reduced across `participants`.
    AllReduce {
        tensor_bytes: u64,
        participants: Vec<DeviceId>,
    },
    /// One-directional transfer, used for inference control messages.
    PointToPoint {
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
    },
}

impl CollectivePayload {
    pub fn kind(&self) -> CollectiveKind {
        match self {
            CollectivePayload::AllToAll { .. } => CollectiveKind::AllToAll,
            CollectivePayload::AllReduce { .. } => CollectiveKind::AllReduce,
            CollectivePayload::PointToPoint { .. } => CollectiveKind::PointToPoint,
        }
    }

    /// Total payload bytes (all-to-all counts every pair once).
    pub fn total_bytes(&self) -> u64 {
        match self {
            CollectivePayload::AllToAll { per_pair_bytes } => per_pair_bytes.values().sum(),
            CollectivePayload::AllReduce { tensor_bytes, .. } => *tensor_bytes,
            CollectivePayload::PointToPoint { bytes, .. } => *bytes,
        }
    }
}

/// A schedulable unit of communication. Micro-ops partitioned from a parent
/// carry `parent` and `micro_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveOp {
    pub op_id: OpId,
    pub priority_class: PriorityClass,
    pub payload: CollectivePayload,
    /// Earliest time the op may be considered for dispatch.
    pub arrival_time: f64,
    pub dependencies: BTreeSet<OpId>,
    pub parent: Option<OpId>,
    pub micro_index: Option<u32>,
}

impl CollectiveOp {
    pub fn kind(&self) -> CollectiveKind {
        self.payload.kind()
    }

    pub fn is_micro(&self) -> bool {
        self.parent.is_some()
    }
}

/// Splits a payload into `num_chunks` micro payloads. Every chunk carries the
/// even share and the final chunk absorbs the remainder, so concatenation
/// reproduces the parent byte totals exactly.
pub fn partition_payload(payload: &CollectivePayload, num_chunks: u32) -> Vec<CollectivePayload> {
    assert!(num_chunks >= 1, "num_chunks must be >= 1");
    let n = num_chunks as u64;
    let split = |bytes: u64, idx: u64| -> u64 {
        let base = bytes / n;
        if idx == n - 1 {
            base + bytes % n
        } else {
            base
        }
    };
    (0..n)
        .map(|i| match payload {
            CollectivePayload::AllToAll { per_pair_bytes } => CollectivePayload::AllToAll {
                per_pair_bytes: per_pair_bytes
                    .iter()
                    .map(|(&pair, &b)| (pair, split(b, i)))
                    .collect(),
            },
            CollectivePayload::AllReduce {
                tensor_bytes,
                participants,
            } => CollectivePayload::AllReduce {
                tensor_bytes: split(*tensor_bytes, i),
                participants: participants.clone(),
            },
            CollectivePayload::PointToPoint { src, dst, bytes } => {
                CollectivePayload::PointToPoint {
                    src: *src,
                    dst: *dst,
                    bytes: split(*bytes, i),
                }
            }
        })
        .collect()
}

/// Number of chunks needed so each chunk's largest per-device share stays at
/// or under `chunk_bytes`.
pub fn num_chunks_for(payload: &CollectivePayload, chunk_bytes: u64) -> u32 {
    assert!(chunk_bytes > 0, "chunk_bytes must be > 0");
    let reference = match payload {
        CollectivePayload::AllToAll { per_pair_bytes } => {
            // Chunking follows the token dimension of the local dispatch
            // buffer, so the reference size is the largest per-device send.
            let mut send_totals: BTreeMap<DeviceId, u64> = BTreeMap::new();
            for (&(src, _), &b) in per_pair_bytes {
                *send_totals.entry(src).or_insert(0) += b;
            }
            send_totals.values().copied().max().unwrap_or(0)
        }
        CollectivePayload::AllReduce { tensor_bytes, .. } => *tensor_bytes,
        CollectivePayload::PointToPoint { bytes, .. } => *bytes,
    };
    reference.div_ceil(chunk_bytes).max(1) as u32
}

/// Routing of one batch: where each token lives and which experts it selected
/// for the current layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchAssignment {
    pub num_tokens: u32,
    /// token index -> origin device.
    pub origin_device: Vec<DeviceId>,
    /// token index -> ordered selected experts (length = gating_top_k).
    pub selection: Vec<Vec<ExpertId>>,
}

impl BatchAssignment {
    pub fn validate(&self, cluster: &ClusterSpec, model: &ModelSpec) -> Result<(), InvalidSpec> {
        let mut v = Vec::new();
        if self.origin_device.len() != self.num_tokens as usize {
            v.push("batch: origin_device length != num_tokens".into());
        }
        if self.selection.len() != self.num_tokens as usize {
            v.push("batch: selection length != num_tokens".into());
        }
        for (t, &d) in self.origin_device.iter().enumerate() {
            if d >= cluster.num_devices {
                v.push(format!("batch: token {t} origin device {d} out of range"));
            }
        }
        for (t, sel) in self.selection.iter().enumerate() {
            if sel.len() != model.gating_top_k as usize {
                v.push(format!("batch: token {t} selection length != gating_top_k"));
            }
            for &e in sel {
                if e >= model.experts_per_layer {
                    v.push(format!("batch: token {t} expert {e} out of range"));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(InvalidSpec { violations: v })
        }
    }
}

/// One finished op or compute task on the timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op_id: OpId,
    pub kind: String,
    /// Device for compute tasks; -1 for collectives spanning devices.
    pub device: i64,
    pub start: f64,
    pub end: f64,
    /// Contention-free transfer time (compute tasks: the task duration).
    pub isolated_duration: f64,
}

/// Per-layer forward/backward completion spans.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTimes {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

/// Everything a simulation run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub records: Vec<OpRecord>,
    pub step_time: f64,
    pub moe_layer_times: LayerTimes,
    /// Duration of each whole all-to-all (micro-ops folded into parents).
    pub all_to_all_times: Vec<f64>,
    /// Matching isolated durations, same order.
    pub all_to_all_isolated: Vec<f64>,
    pub pipelining_efficiency: f64,
    pub inference_times: Vec<f64>,
    pub estimation_accuracy: f64,
    pub finetune_rate: f64,
    pub busy_time_per_device: Vec<f64>,
}

impl SimReport {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        let mut v = Vec::new();
        for r in &self.records {
            if r.end < r.start {
                v.push(format!("report: record {} ends before it starts", r.op_id));
            }
        }
        for (name, f) in [
            ("pipelining_efficiency", self.pipelining_efficiency),
            ("estimation_accuracy", self.estimation_accuracy),
            ("finetune_rate", self.finetune_rate),
        ] {
            if !(0.0..=1.0).contains(&f) {
                v.push(format!("report: {name} out of [0,1]"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(InvalidSpec { violations: v })
        }
    }
}

/// A cluster/model/cost triple that passed validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub cost: CostModel,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid scenario: {}", violations.join("; "))]
pub struct InvalidSpec {
    pub violations: Vec<String>,
}

/// Checks every type invariant and returns the scenario, or a diagnostic
/// listing all violations at once.
pub fn validate_spec(
    cluster: ClusterSpec,
    model: ModelSpec,
    cost: CostModel,
) -> Result<Scenario, InvalidSpec> {
    let mut violations = Vec::new();
    cluster.violations(&mut violations);
    model.violations(&mut violations);
    cost.violations(&mut violations);
    if violations.is_empty() {
        Ok(Scenario {
            cluster,
            model,
            cost,
        })
    } else {
        Err(InvalidSpec { violations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster16() -> ClusterSpec {
        ClusterSpec {
            num_devices: 16,
            devices_per_node: 4,
            inter_node_bw: 12.5e9,
            intra_node_bw: 50e9,
        }
    }

    fn model12x16() -> ModelSpec {
        ModelSpec {
            num_layers: 12,
            experts_per_layer: 16,
            token_embedding_bytes: 4096,
            nonexpert_grad_bytes: vec![40 << 20, 25 << 20],
            gating_top_k: 2,
        }
    }

    #[test]
    fn validates_paper_shaped_scenario() {
        let s = validate_spec(cluster16(), model12x16(), CostModel::default());
        assert!(s.is_ok());
    }

    #[test]
    fn rejects_zero_devices() {
        let mut c = cluster16();
        c.num_devices = 0;
        let err = validate_spec(c, model12x16(), CostModel::default()).unwrap_err();
        assert!(err.violations.iter().any(|v| v.contains("num_devices")));
    }

    #[test]
    fn rejects_top_k_above_expert_count() {
        let mut m = model12x16();
        m.experts_per_layer = 2;
        m.gating_top_k = 3;
        let err = validate_spec(cluster16(), m, CostModel::default()).unwrap_err();
        assert!(err.violations.iter().any(|v| v.contains("gating_top_k")));
    }

    #[test]
    fn collects_all_violations() {
        let mut c = cluster16();
        c.num_devices = 0;
        c.inter_node_bw = 0.0;
        let mut m = model12x16();
        m.num_layers = 0;
        let err = validate_spec(c, m, CostModel::default()).unwrap_err();
        assert!(err.violations.len() >= 3);
    }

    #[test]
    fn partition_remainder_goes_last() {
        let p = CollectivePayload::AllReduce {
            tensor_bytes: 10,
            participants: vec![0, 1],
        };
        let chunks = partition_payload(&p, 3);
        let sizes: Vec<u64> = chunks.iter().map(|c| c.total_bytes()).collect();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn chunk_count_follows_largest_send() {
        let mut per_pair = BTreeMap::new();
        per_pair.insert((0, 1), 70u64);
        per_pair.insert((1, 0), 20u64);
        let p = CollectivePayload::AllToAll {
            per_pair_bytes: per_pair,
        };
        assert_eq!(num_chunks_for(&p, 30), 3);
        assert_eq!(num_chunks_for(&p, 100), 1);
    }

    proptest! {
        #[test]
        fn partition_is_lossless(bytes in 0u64..10_000_000, chunks in 1u32..64) {
            let p = CollectivePayload::AllReduce { tensor_bytes: bytes, participants: vec![0, 1, 2] };
            let parts = partition_payload(&p, chunks);
            prop_assert_eq!(parts.len(), chunks as usize);
            let total: u64 = parts.iter().map(|c| c.total_bytes()).sum();
            prop_assert_eq!(total, bytes);
        }

        #[test]
        fn partition_all_to_all_lossless_per_pair(
            b01 in 0u64..5_000_000, b10 in 0u64..5_000_000, b12 in 0u64..5_000_000,
            chunks in 1u32..32,
        ) {
            let mut per_pair = BTreeMap::new();
            per_pair.insert((0u32, 1u32), b01);
            per_pair.insert((1u32, 0u32), b10);
            per_pair.insert((1u32, 2u32), b12);
            let p = CollectivePayload::AllToAll { per_pair_bytes: per_pair.clone() };
            let parts = partition_payload(&p, chunks);
            let mut sums: BTreeMap<(DeviceId, DeviceId), u64> = BTreeMap::new();
            for part in &parts {
                if let CollectivePayload::AllToAll { per_pair_bytes } = part {
                    for (&pair, &b) in per_pair_bytes {
                        *sums.entry(pair).or_insert(0) += b;
                    }
                }
            }
            prop_assert_eq!(sums, per_pair);
        }
    }
}
