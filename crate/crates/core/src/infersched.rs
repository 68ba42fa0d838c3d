//! Inference-side resource scheduling: sample-path popularity profiling,
//! per-batch popularity estimation, proportional device allocation with
//! first-fit-decreasing packing, and two-phase scheduling with fine-tuning.
//! Baseline (static placement) and Ideal (forced balanced routing) runs give
//! the reference points.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, Dep, EngineScenario, FifoPolicy, OpLabel, TaskLabel};
use crate::types::{
    BatchAssignment, CollectiveOp, CollectivePayload, DeviceId, ExpertId, OpId, PriorityClass,
    Scenario,
};
use crate::workload::{TraceRecord, TraceSet};

pub const DEFAULT_PATH_LENGTH: u16 = 3;
pub const DEFAULT_MAX_PACKED: u16 = 4;

#[derive(Debug, Error)]
pub enum InferSchedError {
    #[error("trace spans {layers} layers, need at least path_length + 1 = {need}")]
    TraceTooShort { layers: u32, need: u32 },
    #[error("layer {layer} is earlier than the path length {path_length}")]
    LayerTooEarly { layer: u32, path_length: u16 },
    #[error("{experts} experts cannot fit on {devices} devices with {max_packed} slots each")]
    InfeasiblePlan {
        experts: u16,
        devices: u32,
        max_packed: u16,
    },
    #[error("no plan for layer {0}")]
    PlanMissing(u32),
    #[error("a popularity profile is required for this mode")]
    ProfileMissing,
    #[error("inference needs one expert per device: {experts} experts vs {devices} devices")]
    ExpertDeviceMismatch { experts: u16, devices: u32 },
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error("profile io: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Profiled next-expert distributions keyed by sample paths of length 1..=l,
/// with per-layer marginals as the final backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityProfile {
    pub path_length: u16,
    pub layers: u32,
    pub experts: u16,
    /// (target layer, observed path ending just before it) -> distribution
    /// over the target layer's experts.
    #[serde(with = "profile_tables")]
    tables: BTreeMap<(u32, Vec<ExpertId>), Vec<f64>>,
    /// Per-layer top-1 marginal distribution.
    marginals: Vec<Vec<f64>>,
}

/// Sparse path entries as a JSON array; tuple keys are not valid JSON keys.
mod profile_tables {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        layer: u32,
        path: Vec<ExpertId>,
        dist: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(
        tables: &BTreeMap<(u32, Vec<ExpertId>), Vec<f64>>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = tables
            .iter()
            .map(|((layer, path), dist)| Entry {
                layer: *layer,
                path: path.clone(),
                dist: dist.clone(),
            })
            .collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<(u32, Vec<ExpertId>), Vec<f64>>, D::Error> {
        let entries = Vec::<Entry>::deserialize(de)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.layer, e.path), e.dist))
            .collect())
    }
}

impl PopularityProfile {
    /// Distribution for a token whose top-1 history ends just before
    /// `target`. Unseen paths back off to shorter suffixes, then the
    /// marginal.
    pub fn lookup(&self, target: u32, history: &[ExpertId]) -> &[f64] {
        let l = (self.path_length as usize).min(history.len());
        for m in (1..=l).rev() {
            let suffix = history[history.len() - m..].to_vec();
            if let Some(dist) = self.tables.get(&(target, suffix)) {
                return dist;
            }
        }
        &self.marginals[target as usize]
    }

    pub fn save(&self, path: &Path) -> Result<(), InferSchedError> {
        let w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, InferSchedError> {
        let r = BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

/// Builds the profile from a training trace: tokens sharing a sample path
/// vote for the expert they picked next.
pub fn build_profile(trace: &TraceSet, l: u16) -> Result<PopularityProfile, InferSchedError> {
    let layers = trace.meta.layers;
    if layers < l as u32 + 1 {
        return Err(InferSchedError::TraceTooShort {
            layers,
            need: l as u32 + 1,
        });
    }
    let e = trace.meta.experts as usize;
    let mut counts: BTreeMap<(u32, Vec<ExpertId>), Vec<u64>> = BTreeMap::new();
    let mut marginal_counts = vec![vec![0u64; e]; layers as usize];
    for r in &trace.records {
        for layer in 0..layers as usize {
            marginal_counts[layer][r.top1(layer) as usize] += 1;
        }
        for target in 1..layers as usize {
            let next = r.top1(target) as usize;
            for m in 1..=(l as usize).min(target) {
                let path: Vec<ExpertId> = (target - m..target).map(|i| r.top1(i)).collect();
                counts
                    .entry((target as u32, path))
                    .or_insert_with(|| vec![0; e])[next] += 1;
            }
        }
    }
    let normalize = |c: &[u64]| -> Vec<f64> {
        let total: u64 = c.iter().sum();
        if total == 0 {
            vec![1.0 / c.len() as f64; c.len()]
        } else {
            c.iter().map(|&x| x as f64 / total as f64).collect()
        }
    };
    Ok(PopularityProfile {
        path_length: l,
        layers,
        experts: trace.meta.experts,
        tables: counts
            .into_iter()
            .map(|(k, c)| {
                let d = normalize(&c);
                (k, d)
            })
            .collect(),
        marginals: marginal_counts.iter().map(|c| normalize(c)).collect(),
    })
}

/// Per-batch popularity estimate for one layer: each token contributes the
/// probabilities of its top-k experts from its path's profiled distribution.
pub struct PopularityEstimate {
    pub popularity: Vec<f64>,
    /// Per token: its estimated top-k experts for the target layer.
    pub per_token_topk: Vec<Vec<ExpertId>>,
}

pub fn estimate_popularity(
    profile: &PopularityProfile,
    histories: &[Vec<ExpertId>],
    target: u32,
    k: u16,
) -> Result<PopularityEstimate, InferSchedError> {
    if target < profile.path_length as u32 {
        return Err(InferSchedError::LayerTooEarly {
            layer: target,
            path_length: profile.path_length,
        });
    }
    let e = profile.experts as usize;
    let mut popularity = vec![0.0f64; e];
    let mut per_token_topk = Vec::with_capacity(histories.len());
    let n_t = histories.len().max(1) as f64;
    for history in histories {
        let dist = profile.lookup(target, history);
        let top = top_k_of(dist, k as usize);
        for &expert in &top {
            popularity[expert as usize] += dist[expert as usize] / n_t;
        }
        per_token_topk.push(top);
    }
    Ok(PopularityEstimate {
        popularity,
        per_token_topk,
    })
}

/// Indices of the k largest values, ties broken by ascending index.
fn top_k_of(values: &[f64], k: usize) -> Vec<ExpertId> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| i as ExpertId).collect()
}

/// Expert-to-device placement for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// Per expert: replica count (0 for experts placed only as leftovers).
    pub replica_counts: Vec<u32>,
    /// Per expert: hosting devices, ascending; always at least one.
    pub hosts: Vec<Vec<DeviceId>>,
    /// Per device: hosted experts in placement order.
    pub hosted: Vec<Vec<ExpertId>>,
    pub max_packed: u16,
}

impl AllocationPlan {
    /// Static placement: expert e lives on device e.
    pub fn identity(experts: u16, devices: u32, max_packed: u16) -> Self {
        assert!(experts as u32 <= devices * max_packed as u32);
        let hosts: Vec<Vec<DeviceId>> = (0..experts).map(|e| vec![e as DeviceId]).collect();
        let mut hosted = vec![Vec::new(); devices as usize];
        for e in 0..experts {
            hosted[e as usize].push(e);
        }
        AllocationPlan {
            replica_counts: vec![1; experts as usize],
            hosts,
            hosted,
            max_packed,
        }
    }

    pub fn devices_used(&self) -> u32 {
        self.hosted.iter().filter(|h| !h.is_empty()).count() as u32
    }

    pub fn validate(&self) -> bool {
        let per_device_ok = self
            .hosted
            .iter()
            .all(|h| h.len() <= self.max_packed as usize);
        let covered = self.hosts.iter().all(|h| !h.is_empty());
        per_device_ok && covered
    }
}

/// Proportional device counts with first-fit-decreasing placement.
///
/// Replica counts follow n_e = round(N * popularity(e)), floored at one for
/// any expert with a top-k contribution, then trimmed back to sum <= N by
/// removing the largest rounding excess first. Each replica occupies one of
/// a device's `max_packed` slots and carries its share of the expert's load;
/// first-fit-decreasing packs replicas into the lowest-numbered device with
/// a free slot, room in its load budget, and no copy of the same expert.
/// Experts without an estimate spread evenly over free devices, otherwise
/// seeded-randomly onto the least-loaded ones.
pub fn allocate(
    popularity: &[f64],
    num_devices: u32,
    max_packed: u16,
    seed: u64,
) -> Result<AllocationPlan, InferSchedError> {
    let e = popularity.len();
    if e as u32 > num_devices * max_packed as u32 {
        return Err(InferSchedError::InfeasiblePlan {
            experts: e as u16,
            devices: num_devices,
            max_packed,
        });
    }
    let n = num_devices as f64;
    let raw: Vec<f64> = popularity.iter().map(|p| p * n).collect();
    let mut counts: Vec<i64> = raw
        .iter()
        .zip(popularity)
        .map(|(&r, &p)| {
            let rounded = r.round() as i64;
            if p > 0.0 {
                rounded.max(1)
            } else {
                0
            }
        })
        .collect();
    // Trim the largest over-allocation first until the replica budget fits.
    while counts.iter().sum::<i64>() > num_devices as i64 {
        let victim = (0..e)
            .filter(|&i| counts[i] > 0)
            .max_by(|&a, &b| {
                let ea = counts[a] as f64 - raw[a];
                let eb = counts[b] as f64 - raw[b];
                ea.total_cmp(&eb).then(b.cmp(&a))
            })
            .expect("positive counts exist while sum exceeds budget");
        counts[victim] -= 1;
    }

    let mut hosted: Vec<Vec<ExpertId>> = vec![Vec::new(); num_devices as usize];
    let mut load: Vec<f64> = vec![0.0; num_devices as usize];
    let mut hosts: Vec<Vec<DeviceId>> = vec![Vec::new(); e];

    // First-fit-decreasing over estimated experts.
    let mut order: Vec<usize> = (0..e).filter(|&i| counts[i] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    for &expert in &order {
        let replica_load = (raw[expert] / counts[expert] as f64).min(1.0);
        for _ in 0..counts[expert] {
            let slot = (0..num_devices as usize).find(|&d| {
                hosted[d].len() < max_packed as usize
                    && !hosted[d].contains(&(expert as ExpertId))
                    && load[d] + replica_load <= 1.0 + 1e-9
            });
            let d = slot.ok_or(InferSchedError::InfeasiblePlan {
                experts: e as u16,
                devices: num_devices,
                max_packed,
            })?;
            hosted[d].push(expert as ExpertId);
            load[d] += replica_load;
            hosts[expert].push(d as DeviceId);
        }
    }

    // Leftover experts: spread evenly over free devices, else seeded-randomly
    // onto the least-loaded devices.
    let zeros: Vec<usize> = (0..e).filter(|&i| counts[i] == 0).collect();
    let mut free: Vec<usize> = (0..num_devices as usize)
        .filter(|&d| hosted[d].is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free_cursor = 0usize;
    for &expert in &zeros {
        let d = if !free.is_empty() {
            let d = free[free_cursor % free.len()];
            free_cursor += 1;
            if hosted[d].len() + 1 >= max_packed as usize {
                free.retain(|&x| x != d);
                free_cursor = 0;
            }
            d
        } else {
            let candidates: Vec<usize> = {
                let min_load = (0..num_devices as usize)
                    .filter(|&d| hosted[d].len() < max_packed as usize)
                    .map(|d| load[d])
                    .fold(f64::INFINITY, f64::min);
                (0..num_devices as usize)
                    .filter(|&d| {
                        hosted[d].len() < max_packed as usize && load[d] <= min_load + 1e-12
                    })
                    .collect()
            };
            if candidates.is_empty() {
                return Err(InferSchedError::InfeasiblePlan {
                    experts: e as u16,
                    devices: num_devices,
                    max_packed,
                });
            }
            candidates[rng.gen_range(0..candidates.len())]
        };
        hosted[d].push(expert as ExpertId);
        hosts[expert].push(d as DeviceId);
    }

    Ok(AllocationPlan {
        replica_counts: counts.iter().map(|&c| c as u32).collect(),
        hosts,
        hosted,
        max_packed,
    })
}

/// Token destinations under a plan: tokens of each expert cycle through its
/// replicas in token order, so replica loads differ by at most one token.
pub fn route_tokens(plan: &AllocationPlan, batch: &BatchAssignment) -> Vec<DeviceId> {
    let mut cursor = vec![0usize; plan.hosts.len()];
    let mut dest = Vec::with_capacity(batch.num_tokens as usize);
    for t in 0..batch.num_tokens as usize {
        let expert = batch.selection[t][0] as usize;
        let replicas = &plan.hosts[expert];
        let d = replicas[cursor[expert] % replicas.len()];
        cursor[expert] += 1;
        dest.push(d);
    }
    dest
}

/// Phase-two verdict for one (batch, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTwoOutcome {
    pub estimated_top: Vec<ExpertId>,
    pub actual_top: Vec<ExpertId>,
    pub matched: bool,
    pub plan_used: AllocationPlan,
    pub overhead_charged: f64,
}

/// Compares estimated and actual top-2k sets; on mismatch the plan is
/// recomputed from the actual popularity and the full scheduling pass is
/// charged, otherwise only the resume signal.
#[allow(clippy::too_many_arguments)]
pub fn two_phase_step(
    plan_estimated: &AllocationPlan,
    estimated_popularity: &[f64],
    actual: &BatchAssignment,
    k: u16,
    num_devices: u32,
    max_packed: u16,
    sched_phase_cost: f64,
    resume_signal_cost: f64,
    seed: u64,
) -> Result<PhaseTwoOutcome, InferSchedError> {
    let e = estimated_popularity.len();
    let mut counts = vec![0u64; e];
    for sel in &actual.selection {
        for &expert in sel {
            counts[expert as usize] += 1;
        }
    }
    let actual_popularity: Vec<f64> = {
        let total: u64 = counts.iter().sum();
        counts
            .iter()
            .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect()
    };
    let top = (2 * k as usize).min(e);
    let estimated_top = top_k_of(estimated_popularity, top);
    let actual_top = top_k_of(&actual_popularity, top);
    let matched = estimated_top.iter().collect::<BTreeSet<_>>()
        == actual_top.iter().collect::<BTreeSet<_>>();
    if matched {
        Ok(PhaseTwoOutcome {
            estimated_top,
            actual_top,
            matched,
            plan_used: plan_estimated.clone(),
            overhead_charged: resume_signal_cost,
        })
    } else {
        let plan = allocate(&actual_popularity, num_devices, max_packed, seed)?;
        Ok(PhaseTwoOutcome {
            estimated_top,
            actual_top,
            matched,
            plan_used: plan,
            overhead_charged: sched_phase_cost,
        })
    }
}

/// Inference scheduling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    /// Static one-expert-per-device placement.
    Baseline,
    /// Estimation, proportional allocation and two-phase fine-tuning.
    Lina,
    /// Scheduling from the actual routing only: fully blocking each layer.
    LinaNoEstimation,
    /// Estimation-based plans without the phase-two check.
    LinaNoFinetune,
    /// Forced perfectly balanced routing on the static placement.
    Ideal,
}

impl std::fmt::Display for InferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InferMode::Baseline => "baseline",
            InferMode::Lina => "lina",
            InferMode::LinaNoEstimation => "lina_no_estimation",
            InferMode::LinaNoFinetune => "lina_no_finetune",
            InferMode::Ideal => "ideal",
        };
        f.write_str(s)
    }
}

/// One layer of a built inference step.
pub struct LayerPlan {
    pub plan: AllocationPlan,
    /// Blocking window before the dispatch all-to-all (phase-one residual
    /// plus the phase-two charge).
    pub sched_wait: f64,
}

/// Builds the engine scenario for one batch: per layer, attention and gate
/// compute, the scheduling window, the dispatch all-to-all with unequal
/// per-pair bytes, sequential expert compute with swap charges, the return
/// all-to-all and the combine.
pub fn build_inference_step(
    scenario: &Scenario,
    batch_per_layer: &[BatchAssignment],
    layers: &[LayerPlan],
    launch_latency: f64,
) -> EngineScenario {
    let cluster = &scenario.cluster;
    let cost = &scenario.cost;
    let n = cluster.num_devices;
    let bytes_per_token = scenario.model.token_embedding_bytes;
    let mut eng = EngineScenario::new(cluster.clone(), launch_latency);
    let mut prev_tail: Vec<Option<engine::TaskId>> = vec![None; n as usize];
    let mut prev_hosted: Vec<BTreeSet<ExpertId>> = vec![BTreeSet::new(); n as usize];

    for (layer_idx, layer) in layers.iter().enumerate() {
        let layer_u = layer_idx as u32;
        let batch = &batch_per_layer[layer_idx];
        let mut origin_tokens = vec![0u64; n as usize];
        for &d in &batch.origin_device {
            origin_tokens[d as usize] += 1;
        }
        let dest = route_tokens(&layer.plan, batch);
        let mut arriving = vec![0u64; n as usize];
        let mut pairs: BTreeMap<(DeviceId, DeviceId), u64> = BTreeMap::new();
        for t in 0..batch.num_tokens as usize {
            let o = batch.origin_device[t];
            let d = dest[t];
            arriving[d as usize] += 1;
            *pairs.entry((o, d)).or_insert(0) += bytes_per_token;
        }

        let mut gates = Vec::new();
        for d in 0..n {
            let deps: Vec<Dep> = prev_tail[d as usize].map(Dep::Task).into_iter().collect();
            let attn_gate = eng.push_task(
                d,
                origin_tokens[d as usize] as f64
                    * (cost.attention_cost_per_token + cost.gate_cost_per_token),
                deps,
                TaskLabel::InferAttnGate { layer: layer_u },
            );
            if layer.sched_wait > 0.0 {
                gates.push(eng.push_task(
                    d,
                    layer.sched_wait,
                    vec![Dep::Task(attn_gate)],
                    TaskLabel::InferSchedWait { layer: layer_u },
                ));
            } else {
                gates.push(attn_gate);
            }
        }

        let a2a1 = eng.push_comm(
            CollectiveOp {
                op_id: OpId(0),
                priority_class: PriorityClass::High,
                payload: CollectivePayload::AllToAll {
                    per_pair_bytes: pairs.clone(),
                },
                arrival_time: 0.0,
                dependencies: Default::default(),
                parent: None,
                micro_index: None,
            },
            OpLabel::InferA2a {
                layer: layer_u,
                half: 1,
            },
            gates,
        );

        let mut experts_done = Vec::new();
        for d in 0..n {
            let hosted_now: BTreeSet<ExpertId> =
                layer.plan.hosted[d as usize].iter().copied().collect();
            let new_experts = hosted_now.difference(&prev_hosted[d as usize]).count();
            let swaps = if layer_idx == 0 { 0 } else { new_experts };
            let dur = arriving[d as usize] as f64 * cost.ffn_cost_per_token
                + swaps as f64 * cost.expert_swap_cost;
            experts_done.push(eng.push_task(
                d,
                dur,
                vec![Dep::Comm(a2a1)],
                TaskLabel::InferExpert { layer: layer_u },
            ));
            prev_hosted[d as usize] = hosted_now;
        }

        let transpose: BTreeMap<(DeviceId, DeviceId), u64> =
            pairs.iter().map(|(&(o, d), &b)| ((d, o), b)).collect();
        let a2a2 = eng.push_comm(
            CollectiveOp {
                op_id: OpId(0),
                priority_class: PriorityClass::High,
                payload: CollectivePayload::AllToAll {
                    per_pair_bytes: transpose,
                },
                arrival_time: 0.0,
                dependencies: Default::default(),
                parent: None,
                micro_index: None,
            },
            OpLabel::InferA2a {
                layer: layer_u,
                half: 2,
            },
            experts_done,
        );

        for d in 0..n {
            let combine = eng.push_task(
                d,
                origin_tokens[d as usize] as f64 * cost.combine_cost_per_token,
                vec![Dep::Comm(a2a2)],
                TaskLabel::InferCombine { layer: layer_u },
            );
            prev_tail[d as usize] = Some(combine);
        }
    }
    eng
}

/// Everything one inference run needs.
#[derive(Debug, Clone)]
pub struct InferRunConfig {
    pub scenario: Scenario,
    pub mode: InferMode,
    pub path_length: u16,
    pub max_packed: u16,
    pub launch_latency: f64,
    pub seed: u64,
}

/// Per-run aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRunOutcome {
    pub mode: InferMode,
    pub batch_times: Vec<f64>,
    pub estimation_accuracy: f64,
    pub finetune_rate: f64,
    /// Per whole all-to-all: simulated duration (all batches pooled).
    pub a2a_times: Vec<f64>,
    /// (batch, layer, matched) phase-two verdicts for scheduled layers.
    pub matches: Vec<(u32, u32, bool)>,
}

impl InferRunOutcome {
    pub fn median_time(&self) -> f64 {
        percentile(&self.batch_times, 50.0)
    }

    pub fn p95_time(&self) -> f64 {
        percentile(&self.batch_times, 95.0)
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs a full inference trace batch by batch under one mode.
pub fn run_inference(
    config: &InferRunConfig,
    trace: &TraceSet,
    profile: Option<&PopularityProfile>,
) -> Result<InferRunOutcome, InferSchedError> {
    let scenario = &config.scenario;
    let cluster = &scenario.cluster;
    let model = &scenario.model;
    let e = model.experts_per_layer;
    let n = cluster.num_devices;
    if e as u32 != n {
        return Err(InferSchedError::ExpertDeviceMismatch {
            experts: e,
            devices: n,
        });
    }
    let needs_profile = matches!(config.mode, InferMode::Lina | InferMode::LinaNoFinetune);
    if needs_profile && profile.is_none() {
        return Err(InferSchedError::ProfileMissing);
    }
    let l = config.path_length;
    let layers = model.num_layers;
    let k = model.gating_top_k;

    let mut batch_times = Vec::new();
    let mut matches = Vec::new();
    let mut a2a_times = Vec::new();

    for b in 0..trace.meta.num_batches {
        let records: Vec<&TraceRecord> = trace.batch(b).collect();
        if records.is_empty() {
            continue;
        }
        let num_tokens = records.len() as u32;
        // Per-layer actual routing (Ideal substitutes balanced selections).
        let batch_per_layer: Vec<BatchAssignment> = (0..layers)
            .map(|layer| BatchAssignment {
                num_tokens,
                origin_device: (0..num_tokens).map(|t| t % n).collect(),
                selection: records
                    .iter()
                    .enumerate()
                    .map(|(t, r)| {
                        if config.mode == InferMode::Ideal {
                            vec![(t as u32 % e as u32) as ExpertId]
                        } else {
                            vec![r.top1(layer as usize)]
                        }
                    })
                    .collect(),
            })
            .collect();

        let mut layer_plans = Vec::with_capacity(layers as usize);
        for layer in 0..layers {
            let identity = AllocationPlan::identity(e, n, config.max_packed);
            let scheduled = layer >= l as u32;
            let batch = &batch_per_layer[layer as usize];
            let plan_seed = config
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((u64::from(b) << 16) | u64::from(layer));
            let (plan, sched_wait) = match config.mode {
                InferMode::Baseline | InferMode::Ideal => (identity, 0.0),
                InferMode::LinaNoEstimation => {
                    if !scheduled {
                        (identity, 0.0)
                    } else {
                        // Plan only after gating: the full pass blocks.
                        let mut counts = vec![0u64; e as usize];
                        for sel in &batch.selection {
                            for &ex in sel {
                                counts[ex as usize] += 1;
                            }
                        }
                        let total: u64 = counts.iter().sum::<u64>().max(1);
                        let pop: Vec<f64> =
                            counts.iter().map(|&c| c as f64 / total as f64).collect();
                        let plan = allocate(&pop, n, config.max_packed, plan_seed)?;
                        (plan, scenario.cost.sched_phase_cost)
                    }
                }
                InferMode::Lina | InferMode::LinaNoFinetune => {
                    if !scheduled {
                        (identity, 0.0)
                    } else {
                        let profile = profile.expect("checked above");
                        let histories: Vec<Vec<ExpertId>> = records
                            .iter()
                            .map(|r| (0..layer as usize).map(|i| r.top1(i)).collect())
                            .collect();
                        let est = estimate_popularity(profile, &histories, layer, k)?;
                        let plan = allocate(&est.popularity, n, config.max_packed, plan_seed)?;
                        // Phase one overlaps the layer's attention and gate
                        // compute; only the residual blocks.
                        let overlap_window = (num_tokens as f64 / n as f64)
                            * (scenario.cost.attention_cost_per_token
                                + scenario.cost.gate_cost_per_token);
                        let phase1 = (scenario.cost.sched_phase_cost - overlap_window).max(0.0);
                        let outcome = two_phase_step(
                            &plan,
                            &est.popularity,
                            batch,
                            k,
                            n,
                            config.max_packed,
                            scenario.cost.sched_phase_cost,
                            scenario.cost.resume_signal_cost,
                            plan_seed,
                        )?;
                        matches.push((b, layer, outcome.matched));
                        if config.mode == InferMode::LinaNoFinetune {
                            (plan, phase1)
                        } else {
                            (outcome.plan_used, phase1 + outcome.overhead_charged)
                        }
                    }
                }
            };
            layer_plans.push(LayerPlan { plan, sched_wait });
        }

        let eng = build_inference_step(
            scenario,
            &batch_per_layer,
            &layer_plans,
            config.launch_latency,
        );
        let timeline = engine::run(&eng, &mut FifoPolicy)?;
        batch_times.push(timeline.makespan);
        for &(start, end, _) in timeline.whole_all_to_alls().values() {
            a2a_times.push(end - start);
        }
    }

    let (acc, rate) = accuracy(&matches);
    Ok(InferRunOutcome {
        mode: config.mode,
        batch_times,
        estimation_accuracy: acc,
        finetune_rate: rate,
        a2a_times,
        matches,
    })
}

/// Accuracy and fine-tune rate over recorded phase-two verdicts.
pub fn accuracy(outcomes: &[(u32, u32, bool)]) -> (f64, f64) {
    if outcomes.is_empty() {
        return (0.0, 0.0);
    }
    let matched = outcomes.iter().filter(|(_, _, m)| *m).count();
    let acc = matched as f64 / outcomes.len() as f64;
    (acc, 1.0 - acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{validate_spec, ClusterSpec, CostModel, ModelSpec};
    use crate::workload::{gen_trace, GeneratorParams, TraceMode};

    fn model(layers: u32, experts: u16) -> ModelSpec {
        ModelSpec {
            num_layers: layers,
            experts_per_layer: experts,
            token_embedding_bytes: 4096,
            nonexpert_grad_bytes: vec![],
            gating_top_k: 1,
        }
    }

    fn gen(p: f64, zipf: f64, tokens: u32, batches: u32, seed: u64) -> GeneratorParams {
        GeneratorParams {
            pattern_strength: p,
            zipf_s: zipf,
            tokens_per_batch: tokens,
            num_batches: batches,
            seed,
        }
    }

    #[test]
    fn point_mass_profile_from_deterministic_trace() {
        let m = model(6, 8);
        let (trace, _) = gen_trace(&gen(1.0, 0.0, 512, 2, 3), &m, TraceMode::TrainingBalanced);
        let profile = build_profile(&trace, 3).unwrap();
        for ((_, _), dist) in profile.tables.iter() {
            let max = dist.iter().cloned().fold(0.0, f64::max);
            assert!(max > 0.999, "profiled row is not a point mass: {dist:?}");
        }
    }

    #[test]
    fn independent_trace_profile_near_uniform() {
        let m = model(4, 8);
        let (trace, _) = gen_trace(&gen(0.0, 0.0, 25000, 2, 5), &m, TraceMode::TrainingBalanced);
        let profile = build_profile(&trace, 1).unwrap();
        for ((_, path), dist) in profile.tables.iter() {
            assert_eq!(path.len(), 1);
            for &p in dist {
                assert!((p - 0.125).abs() < 0.03, "{dist:?}");
            }
        }
    }

    #[test]
    fn profile_reproduces_ground_truth_rows() {
        let m = model(6, 16);
        let (trace, truth) = gen_trace(
            &gen(0.6, 0.0, 10000, 5, 24),
            &m,
            TraceMode::TrainingBalanced,
        );
        let profile = build_profile(&trace, 1).unwrap();
        let rows = truth.first_order_rows();
        for target in 2..6usize {
            for b in 0..16u16 {
                let dist = profile.lookup(target as u32, &[b]);
                for c in 0..16usize {
                    let exact = rows[target - 1][b as usize][c];
                    assert!(
                        (dist[c] - exact).abs() < 0.02,
                        "target {target} path {b} expert {c}: {} vs {exact}",
                        dist[c]
                    );
                }
            }
        }
    }

    #[test]
    fn too_short_trace_is_rejected() {
        let m = model(3, 8);
        let (trace, _) = gen_trace(&gen(0.5, 0.0, 16, 1, 1), &m, TraceMode::TrainingBalanced);
        assert!(matches!(
            build_profile(&trace, 3),
            Err(InferSchedError::TraceTooShort { .. })
        ));
    }

    #[test]
    fn estimation_layer_too_early() {
        let m = model(6, 8);
        let (trace, _) = gen_trace(&gen(0.5, 0.0, 64, 1, 1), &m, TraceMode::TrainingBalanced);
        let profile = build_profile(&trace, 3).unwrap();
        assert!(matches!(
            estimate_popularity(&profile, &[vec![0, 1, 2]], 2, 1),
            Err(InferSchedError::LayerTooEarly { .. })
        ));
    }

    #[test]
    fn hand_evaluated_popularity_aggregation() {
        // Token A contributes P(e1) = 0.5, token B contributes P(e1) = 1.0;
        // popularity(e1) = (0.5 + 1.0) / 2.
        let mut tables = BTreeMap::new();
        tables.insert((3u32, vec![0u16]), vec![0.5, 0.5, 0.0, 0.0]);
        tables.insert((3u32, vec![1u16]), vec![1.0, 0.0, 0.0, 0.0]);
        let profile = PopularityProfile {
            path_length: 1,
            layers: 4,
            experts: 4,
            tables,
            marginals: vec![vec![0.25; 4]; 4],
        };
        let est = estimate_popularity(&profile, &[vec![0], vec![1]], 3, 1).unwrap();
        assert_eq!(est.popularity[0], 0.75);
        assert_eq!(est.popularity[1], 0.0);
    }

    #[test]
    fn unseen_path_backs_off_to_suffix() {
        let mut tables = BTreeMap::new();
        tables.insert((3u32, vec![1u16, 2u16]), vec![0.0, 0.0, 1.0, 0.0]);
        let profile = PopularityProfile {
            path_length: 3,
            layers: 4,
            experts: 4,
            tables,
            marginals: vec![vec![0.25; 4]; 4],
        };
        // Full path (0,1,2) unseen; the length-2 suffix (1,2) is known.
        let dist = profile.lookup(3, &[0, 1, 2]);
        assert_eq!(dist[2], 1.0);
        // Entirely unseen: falls to the marginal.
        let dist = profile.lookup(3, &[3, 3, 3]);
        assert_eq!(dist[2], 0.25);
    }

    #[test]
    fn uniform_popularity_gives_identity_allocation() {
        let pop = vec![1.0 / 16.0; 16];
        let plan = allocate(&pop, 16, 4, 0).unwrap();
        for e in 0..16usize {
            assert_eq!(plan.replica_counts[e], 1);
            assert_eq!(plan.hosts[e], vec![e as DeviceId]);
        }
        assert!(plan.validate());
    }

    #[test]
    fn hand_computed_eq1_counts() {
        let plan = allocate(&[0.75, 0.25], 4, 4, 0).unwrap();
        assert_eq!(plan.replica_counts, vec![3, 1]);
        assert_eq!(plan.hosts[0], vec![0, 1, 2]);
        assert_eq!(plan.hosts[1], vec![3]);
    }

    #[test]
    fn replicas_never_share_a_device() {
        let plan = allocate(&[0.5, 0.3, 0.2, 0.0, 0.0, 0.0], 6, 4, 9).unwrap();
        for hosts in &plan.hosts {
            let unique: BTreeSet<_> = hosts.iter().collect();
            assert_eq!(unique.len(), hosts.len());
        }
        assert!(plan.validate());
    }

    #[test]
    fn infeasible_when_experts_exceed_slots() {
        let pop = vec![0.1; 9];
        assert!(matches!(
            allocate(&pop, 2, 4, 0),
            Err(InferSchedError::InfeasiblePlan { .. })
        ));
    }

    #[test]
    fn routing_splits_replicas_within_one_token() {
        let plan = allocate(&[0.75, 0.25], 4, 4, 0).unwrap();
        let batch = BatchAssignment {
            num_tokens: 10,
            origin_device: (0..10).map(|t| t % 4).collect(),
            selection: (0..10)
                .map(|t| vec![if t < 8 { 0u16 } else { 1u16 }])
                .collect(),
        };
        let dest = route_tokens(&plan, &batch);
        let mut per_replica: BTreeMap<DeviceId, u32> = BTreeMap::new();
        for (t, &d) in dest.iter().enumerate() {
            if t < 8 {
                *per_replica.entry(d).or_insert(0) += 1;
            }
        }
        let counts: Vec<u32> = per_replica.values().copied().collect();
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn phase_two_resume_on_match_and_replan_on_mismatch() {
        let plan = AllocationPlan::identity(4, 4, 4);
        let batch = BatchAssignment {
            num_tokens: 8,
            origin_device: (0..8).map(|t| t % 4).collect(),
            selection: (0..8).map(|t| vec![(t % 2) as u16]).collect(),
        };
        // Estimated popularity agrees: experts 0 and 1 are the top-2.
        let est = vec![0.5, 0.5, 0.0, 0.0];
        let out = two_phase_step(&plan, &est, &batch, 1, 4, 4, 6.2e-3, 1.45e-3, 0).unwrap();
        assert!(out.matched);
        assert_eq!(out.overhead_charged, 1.45e-3);
        // Disjoint estimate: full re-schedule.
        let est = vec![0.0, 0.0, 0.5, 0.5];
        let out = two_phase_step(&plan, &est, &batch, 1, 4, 4, 6.2e-3, 1.45e-3, 0).unwrap();
        assert!(!out.matched);
        assert_eq!(out.overhead_charged, 6.2e-3);
    }

    #[test]
    fn tie_at_rank_boundary_is_deterministic() {
        let pop = vec![0.3, 0.3, 0.2, 0.2];
        let a = top_k_of(&pop, 2);
        let b = top_k_of(&pop, 2);
        assert_eq!(a, vec![0, 1]);
        assert_eq!(a, b);
    }

    fn scenario16() -> Scenario {
        validate_spec(
            ClusterSpec {
                num_devices: 16,
                devices_per_node: 4,
                inter_node_bw: 12.5e9,
                intra_node_bw: 50e9,
            },
            model(8, 16),
            CostModel {
                gate_cost_per_token: 1e-6,
                ffn_cost_per_token: 20e-6,
                combine_cost_per_token: 1e-6,
                attention_cost_per_token: 12e-6,
                expert_swap_cost: 0.1e-3,
                ..CostModel::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn balanced_routing_on_identity_plan_finishes_together() {
        let scenario = scenario16();
        let config = InferRunConfig {
            scenario: scenario.clone(),
            mode: InferMode::Ideal,
            path_length: 3,
            max_packed: 4,
            launch_latency: 0.0,
            seed: 1,
        };
        let (trace, _) = gen_trace(
            &gen(0.6, 0.5, 256, 2, 44),
            &scenario.model,
            TraceMode::InferenceSkewed,
        );
        let out = run_inference(&config, &trace, None).unwrap();
        assert_eq!(out.batch_times.len(), 2);
        assert!((out.median_time() - out.p95_time()).abs() < 1e-9);
    }

    #[test]
    fn straggler_under_static_plan() {
        // The hot expert takes ~4x the tokens of the coldest: its device
        // works far longer in the expert phase, delaying the batch.
        let scenario = scenario16();
        let config = InferRunConfig {
            scenario: scenario.clone(),
            mode: InferMode::Baseline,
            path_length: 3,
            max_packed: 4,
            launch_latency: 0.0,
            seed: 1,
        };
        let (trace, _) = gen_trace(
            &gen(0.6, 0.5, 512, 4, 44),
            &scenario.model,
            TraceMode::InferenceSkewed,
        );
        let skewed = run_inference(&config, &trace, None).unwrap();
        let ideal = run_inference(
            &InferRunConfig {
                mode: InferMode::Ideal,
                scenario: scenario.clone(),
                ..config
            },
            &trace,
            None,
        )
        .unwrap();
        assert!(
            skewed.median_time() > ideal.median_time() * 1.2,
            "skewed {} vs ideal {}",
            skewed.median_time(),
            ideal.median_time()
        );
    }

    #[test]
    fn profile_round_trips_through_json() {
        let m = model(6, 8);
        let (trace, _) = gen_trace(&gen(0.6, 0.0, 256, 2, 7), &m, TraceMode::TrainingBalanced);
        let profile = build_profile(&trace, 2).unwrap();
        let dir = std::env::temp_dir().join("linasim-infersched-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("profile.json");
        profile.save(&path).unwrap();
        let loaded = PopularityProfile::load(&path).unwrap();
        assert_eq!(profile, loaded);
    }
}
