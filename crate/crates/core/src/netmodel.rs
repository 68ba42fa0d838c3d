//! Fluid bandwidth model: concurrently active ops receive max-min fair-share
//! rates over the NIC resources they occupy.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{ClusterSpec, CollectiveOp, CollectivePayload, DeviceId, OpId};

/// One shareable network resource. Each device owns an inter-node NIC and an
/// intra-node fabric port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NicId {
    Inter(DeviceId),
    Intra(DeviceId),
}

impl NicId {
    pub fn capacity(&self, cluster: &ClusterSpec) -> f64 {
        match self {
            NicId::Inter(_) => cluster.inter_node_bw,
            NicId::Intra(_) => cluster.intra_node_bw,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetModelError {
    #[error("device {0} outside the cluster")]
    UnknownDevice(DeviceId),
    #[error("remaining bytes went negative on {op} (dt too large)")]
    NegativeRemainder { op: OpId },
}

/// Per-NIC byte demand of one op.
///
/// All-to-all charges each device's NIC with max(bytes sent, bytes received)
/// over the pairs crossing that tier (full-duplex). All-reduce charges the
/// ring volume 2(n-1)/n * tensor_bytes on every participant. Point-to-point
/// charges the two endpoints.
pub fn op_demand(
    op: &CollectiveOp,
    cluster: &ClusterSpec,
) -> Result<BTreeMap<NicId, f64>, NetModelError> {
    let check = |d: DeviceId| -> Result<(), NetModelError> {
        if d >= cluster.num_devices {
            Err(NetModelError::UnknownDevice(d))
        } else {
            Ok(())
        }
    };
    let mut demand: BTreeMap<NicId, f64> = BTreeMap::new();
    match &op.payload {
        CollectivePayload::AllToAll { per_pair_bytes } => {
            // (out, in) accumulators per device per tier.
            let mut inter: BTreeMap<DeviceId, (u64, u64)> = BTreeMap::new();
            let mut intra: BTreeMap<DeviceId, (u64, u64)> = BTreeMap::new();
            for (&(src, dst), &bytes) in per_pair_bytes {
                check(src)?;
                check(dst)?;
                if src == dst || bytes == 0 {
                    continue; // local copy or placeholder pointer
                }
                let tier = if cluster.same_node(src, dst) {
                    &mut intra
                } else {
                    &mut inter
                };
                tier.entry(src).or_insert((0, 0)).0 += bytes;
                tier.entry(dst).or_insert((0, 0)).1 += bytes;
            }
            for (dev, (out, inc)) in inter {
                demand.insert(NicId::Inter(dev), out.max(inc) as f64);
            }
            for (dev, (out, inc)) in intra {
                demand.insert(NicId::Intra(dev), out.max(inc) as f64);
            }
        }
        CollectivePayload::AllReduce {
            tensor_bytes,
            participants,
        } => {
            for &d in participants {
                check(d)?;
            }
            let n = participants.len();
            if n >= 2 && *tensor_bytes > 0 {
                let per_nic = 2.0 * (n as f64 - 1.0) / n as f64 * *tensor_bytes as f64;
                let spans_nodes = participants
                    .iter()
                    .any(|&d| !cluster.same_node(d, participants[0]));
                for &d in participants {
                    let nic = if spans_nodes {
                        NicId::Inter(d)
                    } else {
                        NicId::Intra(d)
                    };
                    demand.insert(nic, per_nic);
                }
            }
        }
        CollectivePayload::PointToPoint { src, dst, bytes } => {
            check(*src)?;
            check(*dst)?;
            if src != dst && *bytes > 0 {
                let mk = |d: DeviceId| {
                    if cluster.same_node(*src, *dst) {
                        NicId::Intra(d)
                    } else {
                        NicId::Inter(d)
                    }
                };
                demand.insert(mk(*src), *bytes as f64);
                demand.insert(mk(*dst), *bytes as f64);
            }
        }
    }
    Ok(demand)
}

/// Contention-free transfer time: the slowest NIC at full capacity.
pub fn isolated_duration(op: &CollectiveOp, cluster: &ClusterSpec) -> Result<f64, NetModelError> {
    let demand = op_demand(op, cluster)?;
    Ok(demand
        .iter()
        .map(|(nic, bytes)| bytes / nic.capacity(cluster))
        .fold(0.0, f64::max))
}

/// One op in flight: per-NIC remaining bytes.
#[derive(Debug, Clone)]
struct Flow {
    remaining: BTreeMap<NicId, f64>,
}

/// The set of ops currently transferring.
#[derive(Debug, Clone, Default)]
pub struct ActiveFlowSet {
    flows: BTreeMap<OpId, Flow>,
}

impl ActiveFlowSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn contains(&self, op: OpId) -> bool {
        self.flows.contains_key(&op)
    }

    pub fn active_ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.flows.keys().copied()
    }

    /// Inserts an op with the given demand. Zero-demand ops complete
    /// instantly and are reported back instead of being inserted.
    pub fn insert(&mut self, op: OpId, demand: BTreeMap<NicId, f64>) -> InsertOutcome {
        let remaining: BTreeMap<NicId, f64> =
            demand.into_iter().filter(|(_, b)| *b > 0.0).collect();
        if remaining.is_empty() {
            InsertOutcome::CompletedInstantly
        } else {
            self.flows.insert(op, Flow { remaining });
            InsertOutcome::Active
        }
    }

    /// Max-min fair-share rates by progressive filling: grow all unfrozen op
    /// rates together, freeze the ops crossing each NIC as it saturates, and
    /// repeat. An op's rate is the level at which its first bottleneck NIC
    /// saturated, i.e. its minimum share over its NICs.
    pub fn fair_share_rates(&self, cluster: &ClusterSpec) -> BTreeMap<OpId, f64> {
        let mut rates: BTreeMap<OpId, f64> = BTreeMap::new();
        if self.flows.is_empty() {
            return rates;
        }
        let mut unfrozen: Vec<OpId> = self.flows.keys().copied().collect();
        // ops crossing each NIC (only NICs with remaining bytes count)
        let mut nic_ops: BTreeMap<NicId, Vec<OpId>> = BTreeMap::new();
        for (&op, flow) in &self.flows {
            for &nic in flow.remaining.keys() {
                nic_ops.entry(nic).or_default().push(op);
            }
        }
        while !unfrozen.is_empty() {
            // Saturation level of each NIC if all unfrozen ops keep growing.
            let mut best: Option<(f64, NicId)> = None;
            for (&nic, ops) in &nic_ops {
                let frozen_sum: f64 = ops.iter().filter_map(|op| rates.get(op)).sum();
                let unfrozen_count = ops.iter().filter(|op| !rates.contains_key(op)).count();
                if unfrozen_count == 0 {
                    continue;
                }
                let level = (nic.capacity(cluster) - frozen_sum) / unfrozen_count as f64;
                let level = level.max(0.0);
                match best {
                    Some((l, _)) if l <= level => {}
                    _ => best = Some((level, nic)),
                }
            }
            let Some((level, _)) = best else { break };
            // Freeze every unfrozen op crossing a NIC that saturates at this
            // level (within a relative tolerance for float noise).
            let eps = 1e-12 * level.max(1.0);
            let mut newly_frozen = Vec::new();
            for (&nic, ops) in &nic_ops {
                let frozen_sum: f64 = ops.iter().filter_map(|op| rates.get(op)).sum();
                let unfrozen_count = ops.iter().filter(|op| !rates.contains_key(op)).count();
                if unfrozen_count == 0 {
                    continue;
                }
                let nic_level = ((nic.capacity(cluster) - frozen_sum) / unfrozen_count as f64).max(0.0);
                if nic_level <= level + eps {
                    for op in ops {
                        if !rates.contains_key(op) {
                            newly_frozen.push(*op);
                        }
                    }
                }
            }
            newly_frozen.sort_unstable();
            newly_frozen.dedup();
            for op in newly_frozen {
                rates.insert(op, level);
            }
            unfrozen.retain(|op| !rates.contains_key(op));
        }
        rates
    }

    /// Time until the next op leaves one of its NICs (or completes) under the
    /// given rates. None when no flow is active.
    pub fn time_to_next_event(&self, rates: &BTreeMap<OpId, f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (op, flow) in &self.flows {
            let rate = *rates.get(op).unwrap_or(&0.0);
            if rate <= 0.0 {
                continue;
            }
            for &remaining in flow.remaining.values() {
                let dt = remaining / rate;
                best = Some(best.map_or(dt, |b: f64| b.min(dt)));
            }
        }
        best
    }

    /// Advances all flows by `dt` at the given rates; returns the ops whose
    /// bytes reached zero on every NIC.
    pub fn advance(
        &mut self,
        rates: &BTreeMap<OpId, f64>,
        dt: f64,
    ) -> Result<Vec<OpId>, NetModelError> {
        let mut completed = Vec::new();
        for (op, flow) in self.flows.iter_mut() {
            let rate = *rates.get(op).unwrap_or(&0.0);
            if rate <= 0.0 {
                continue;
            }
            let step = rate * dt;
            let mut emptied = Vec::new();
            for (&nic, remaining) in flow.remaining.iter_mut() {
                let slack = 1e-9 * remaining.max(1.0);
                if *remaining < step - slack {
                    return Err(NetModelError::NegativeRemainder { op: *op });
                }
                *remaining -= step;
                if *remaining <= slack {
                    emptied.push(nic);
                }
            }
            for nic in emptied {
                flow.remaining.remove(&nic);
            }
            if flow.remaining.is_empty() {
                completed.push(*op);
            }
        }
        for op in &completed {
            self.flows.remove(op);
        }
        Ok(completed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Active,
    CompletedInstantly,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PriorityClass;
    use std::collections::BTreeSet;

    fn one_node_4() -> ClusterSpec {
        ClusterSpec {
            num_devices: 4,
            devices_per_node: 4,
            inter_node_bw: 1e8,
            intra_node_bw: 1e8,
        }
    }

    fn two_nodes_8() -> ClusterSpec {
        ClusterSpec {
            num_devices: 8,
            devices_per_node: 4,
            inter_node_bw: 1e8,
            intra_node_bw: 4e8,
        }
    }

    fn op(id: u64, payload: CollectivePayload) -> CollectiveOp {
        CollectiveOp {
            op_id: OpId(id),
            priority_class: PriorityClass::High,
            payload,
            arrival_time: 0.0,
            dependencies: BTreeSet::new(),
            parent: None,
            micro_index: None,
        }
    }

    fn uniform_a2a(devices: u32, bytes: u64) -> CollectivePayload {
        let mut per_pair = BTreeMap::new();
        for s in 0..devices {
            for d in 0..devices {
                if s != d {
                    per_pair.insert((s, d), bytes);
                }
            }
        }
        CollectivePayload::AllToAll {
            per_pair_bytes: per_pair,
        }
    }

    #[test]
    fn all_pairs_intra_demand_is_symmetric() {
        let cluster = one_node_4();
        let o = op(1, uniform_a2a(4, 1 << 20));
        let demand = op_demand(&o, &cluster).unwrap();
        for d in 0..4 {
            assert_eq!(demand[&NicId::Intra(d)], 3.0 * (1 << 20) as f64);
            assert!(!demand.contains_key(&NicId::Inter(d)));
        }
    }

    #[test]
    fn ring_all_reduce_demand() {
        let cluster = two_nodes_8();
        let o = op(
            2,
            CollectivePayload::AllReduce {
                tensor_bytes: 100 << 20,
                participants: (0..4).collect(),
            },
        );
        // group fits one node -> intra, 2*(4-1)/4 * 100MB = 150MB
        let demand = op_demand(&o, &cluster).unwrap();
        assert_eq!(demand[&NicId::Intra(0)], 150.0 * (1 << 20) as f64);

        let spanning = op(
            3,
            CollectivePayload::AllReduce {
                tensor_bytes: 100 << 20,
                participants: (0..8).collect(),
            },
        );
        let demand = op_demand(&spanning, &cluster).unwrap();
        assert_eq!(demand[&NicId::Inter(0)], 175.0 * (1 << 20) as f64);
    }

    #[test]
    fn zero_pairs_complete_instantly() {
        let cluster = one_node_4();
        let mut per_pair = BTreeMap::new();
        per_pair.insert((0u32, 1u32), 0u64);
        per_pair.insert((2u32, 3u32), 0u64);
        let o = op(4, CollectivePayload::AllToAll { per_pair_bytes: per_pair });
        let demand = op_demand(&o, &cluster).unwrap();
        assert!(demand.is_empty());
        let mut flows = ActiveFlowSet::new();
        assert_eq!(flows.insert(o.op_id, demand), InsertOutcome::CompletedInstantly);
        assert!(flows.is_empty());
    }

    #[test]
    fn unknown_device_rejected() {
        let cluster = one_node_4();
        let o = op(
            5,
            CollectivePayload::PointToPoint {
                src: 0,
                dst: 9,
                bytes: 10,
            },
        );
        assert_eq!(
            op_demand(&o, &cluster).unwrap_err(),
            NetModelError::UnknownDevice(9)
        );
    }

    #[test]
    fn equal_share_on_one_nic() {
        let cluster = one_node_4();
        let mut flows = ActiveFlowSet::new();
        let mut d = BTreeMap::new();
        d.insert(NicId::Intra(0), 100.0);
        flows.insert(OpId(1), d.clone());
        flows.insert(OpId(2), d);
        let rates = flows.fair_share_rates(&cluster);
        assert_eq!(rates[&OpId(1)], 0.5e8);
        assert_eq!(rates[&OpId(2)], 0.5e8);
    }

    #[test]
    fn lone_op_gets_full_capacity() {
        let cluster = one_node_4();
        let mut flows = ActiveFlowSet::new();
        let mut d = BTreeMap::new();
        d.insert(NicId::Intra(1), 100.0);
        flows.insert(OpId(7), d);
        let rates = flows.fair_share_rates(&cluster);
        assert_eq!(rates[&OpId(7)], 1e8);
    }

    #[test]
    fn min_share_over_nics_wins() {
        // A crosses NICs 1 and 2, C crosses NIC 2 only; equal capacities B.
        // NIC 2 saturates first at B/2 freezing both; A's rate is B/2.
        let cluster = one_node_4();
        let mut flows = ActiveFlowSet::new();
        let mut a = BTreeMap::new();
        a.insert(NicId::Intra(1), 100.0);
        a.insert(NicId::Intra(2), 100.0);
        flows.insert(OpId(1), a);
        let mut c = BTreeMap::new();
        c.insert(NicId::Intra(2), 100.0);
        flows.insert(OpId(2), c);
        let rates = flows.fair_share_rates(&cluster);
        assert_eq!(rates[&OpId(1)], 0.5e8);
        assert_eq!(rates[&OpId(2)], 0.5e8);
    }

    #[test]
    fn bottlenecked_elsewhere_frees_capacity() {
        // A on NICs 1+2 with a third op B also on NIC 1; C alone with A on 2.
        // NIC1: A,B -> level B/2 each. NIC2 then has A frozen at 0.5, C grows
        // to the residual 0.5... then full? C's only NIC is 2: level = (1 - 0.5)/1 = 0.5e8.
        let cluster = one_node_4();
        let mut flows = ActiveFlowSet::new();
        let mut a = BTreeMap::new();
        a.insert(NicId::Intra(1), 100.0);
        a.insert(NicId::Intra(2), 100.0);
        flows.insert(OpId(1), a);
        let mut b = BTreeMap::new();
        b.insert(NicId::Intra(1), 100.0);
        flows.insert(OpId(2), b);
        let mut c = BTreeMap::new();
        c.insert(NicId::Intra(2), 100.0);
        flows.insert(OpId(3), c);
        let rates = flows.fair_share_rates(&cluster);
        assert_eq!(rates[&OpId(1)], 0.5e8);
        assert_eq!(rates[&OpId(2)], 0.5e8);
        assert_eq!(rates[&OpId(3)], 0.5e8);
    }

    #[test]
    fn advance_completes_single_op() {
        let cluster = one_node_4();
        let mut flows = ActiveFlowSet::new();
        let mut d = BTreeMap::new();
        d.insert(NicId::Intra(0), 100e6);
        flows.insert(OpId(1), d);
        let rates = flows.fair_share_rates(&cluster);
        let dt = flows.time_to_next_event(&rates).unwrap();
        assert!((dt - 1.0).abs() < 1e-12);
        let done = flows.advance(&rates, dt).unwrap();
        assert_eq!(done, vec![OpId(1)]);
        assert!(flows.is_empty());
    }

    #[test]
    fn two_overlapped_equal_ops_take_exactly_twice() {
        let cluster = one_node_4();
        let mut flows = ActiveFlowSet::new();
        for id in [1u64, 2] {
            let mut d = BTreeMap::new();
            d.insert(NicId::Intra(0), 100e6);
            flows.insert(OpId(id), d);
        }
        let rates = flows.fair_share_rates(&cluster);
        let dt = flows.time_to_next_event(&rates).unwrap();
        assert!((dt - 2.0).abs() < 1e-9);
        let done = flows.advance(&rates, dt).unwrap();
        assert_eq!(done.len(), 2);
    }

    /// Closed-form oracle for two staggered flows on one shared NIC of
    /// capacity cap: the second starts at t1 with the first still holding r1
    /// bytes. Returns the first flow's total completion time.
    fn staggered_first_completion(cap: f64, size: f64, t1: f64) -> f64 {
        let r1 = size - cap * t1; // bytes left when the overlap starts
        assert!(r1 > 0.0);
        // Shared phase at cap/2 until one side finishes; the first flow has
        // r1, the second has the full size, so the first finishes first.
        t1 + r1 / (cap / 2.0)
    }

    #[test]
    fn staggered_overlap_matches_closed_form() {
        let cluster = one_node_4();
        let cap = 1e8;
        let size = 100e6;
        for t1 in [0.1, 0.4, 0.75] {
            let mut flows = ActiveFlowSet::new();
            let mut d = BTreeMap::new();
            d.insert(NicId::Intra(0), size);
            flows.insert(OpId(1), d);
            // advance alone until t1
            let rates = flows.fair_share_rates(&cluster);
            flows.advance(&rates, t1).unwrap();
            let mut d = BTreeMap::new();
            d.insert(NicId::Intra(0), size);
            flows.insert(OpId(2), d);
            // run to first completion
            let rates = flows.fair_share_rates(&cluster);
            let dt = flows.time_to_next_event(&rates).unwrap();
            let done = flows.advance(&rates, dt).unwrap();
            assert_eq!(done, vec![OpId(1)]);
            let t_done = t1 + dt;
            let expected = staggered_first_completion(cap, size, t1);
            assert!((t_done - expected).abs() < 1e-9, "t1={t1}");
            // slowdown strictly between 1x and 2x of the isolated 1.0s
            assert!(t_done > 1.0 && t_done < 2.0);
        }
    }
}
