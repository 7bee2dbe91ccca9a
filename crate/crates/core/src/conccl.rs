//! DMA-offloaded collectives: per-engine transfer plans, a byte-exact
//! validator, and a launch/sync-aware cost model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::machine::MachineDescriptor;
use crate::workload::{CollectiveKind, CollectiveOp, EfficiencyParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("rank {rank} slot {slot} is never written")]
    Incomplete { rank: u32, slot: u64 },
    #[error("rank {rank} has overlapping writes at byte {offset}")]
    OverlappingWrite { rank: u32, offset: u64 },
    #[error("rank {rank} slot {slot} holds the wrong data")]
    Mismatch { rank: u32, slot: u64 },
    #[error("transfer {index}: {reason}")]
    InvalidTransfer { index: usize, reason: String },
    #[error("gpu {gpu} engine {engine}: seq numbers are not contiguous from 0")]
    SeqGap { gpu: u32, engine: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transfer {
    #[serde(rename = "src")]
    pub src_gpu: u32,
    #[serde(rename = "dst")]
    pub dst_gpu: u32,
    #[serde(rename = "src_off")]
    pub src_offset: u64,
    #[serde(rename = "dst_off")]
    pub dst_offset: u64,
    #[serde(rename = "len")]
    pub length: u64,
    #[serde(rename = "engine")]
    pub engine_id: u32,
    pub seq: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub kind: CollectiveKind,
    pub n_ranks: u32,
    /// All-gather: bytes each rank contributes. All-to-all: bytes per peer.
    pub chunk_bytes: u64,
    /// Every rank's source buffer has this size.
    pub src_buffer_bytes: u64,
    /// Every rank's destination buffer has this size.
    pub dst_buffer_bytes: u64,
    /// Engines available on each issuing GPU when the plan was built.
    pub engines_per_gpu: u32,
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCost {
    pub total: f64,
    /// Latest completion time on each engine index, across GPUs.
    pub per_engine: Vec<f64>,
    /// Longest single transfer on its link, no overheads.
    pub wire: f64,
}

fn direct_plan(
    kind: CollectiveKind,
    n_ranks: u32,
    chunk_bytes: u64,
    md: &MachineDescriptor,
) -> Result<TransferPlan> {
    if n_ranks == 0 {
        return Err(Error::InvalidWorkload("collective needs at least one rank".into()));
    }
    if n_ranks > md.gpus_per_node {
        return Err(Error::TooManyRanks {
            n_ranks,
            gpus: md.gpus_per_node,
        });
    }
    if chunk_bytes == 0 && n_ranks > 1 {
        return Err(Error::InvalidWorkload("chunk size must be positive".into()));
    }
    let n = u64::from(n_ranks);
    let (src_buffer_bytes, dst_buffer_bytes) = match kind {
        CollectiveKind::AllGather => (chunk_bytes, n * chunk_bytes),
        CollectiveKind::AllToAll => (n * chunk_bytes, n * chunk_bytes),
    };
    let engines = md.dma_engines_per_gpu;
    let mut transfers = Vec::with_capacity((n_ranks * n_ranks.saturating_sub(1)) as usize);
    for g in 0..n_ranks {
        let peers = (0..n_ranks).filter(|&p| p != g);
        for (idx, p) in peers.enumerate() {
            let idx = idx as u32;
            let src_offset = match kind {
                CollectiveKind::AllGather => 0,
                CollectiveKind::AllToAll => u64::from(p) * chunk_bytes,
            };
            transfers.push(Transfer {
                src_gpu: g,
                dst_gpu: p,
                src_offset,
                dst_offset: u64::from(g) * chunk_bytes,
                length: chunk_bytes,
                engine_id: idx % engines,
                seq: idx / engines,
            });
        }
    }
    Ok(TransferPlan {
        kind,
        n_ranks,
        chunk_bytes,
        src_buffer_bytes,
        dst_buffer_bytes,
        engines_per_gpu: engines,
        transfers,
    })
}

/// Each rank writes its own chunk into slot `rank` of every peer.
pub fn plan_all_gather(n_ranks: u32, chunk_bytes: u64, md: &MachineDescriptor) -> Result<TransferPlan> {
    direct_plan(CollectiveKind::AllGather, n_ranks, chunk_bytes, md)
}

/// Send-slot `p` of rank `g` lands in receive-slot `g` of rank `p`.
pub fn plan_all_to_all(
    n_ranks: u32,
    per_peer_bytes: u64,
    md: &MachineDescriptor,
) -> Result<TransferPlan> {
    direct_plan(CollectiveKind::AllToAll, n_ranks, per_peer_bytes, md)
}

pub fn plan_collective(c: &CollectiveOp, md: &MachineDescriptor) -> Result<TransferPlan> {
    c.validate()?;
    direct_plan(c.kind, c.n_ranks, c.chunk_bytes(), md)
}

/// A run of destination bytes copied from `(origin, origin_off..)`.
#[derive(Debug, Clone, Copy)]
struct Segment {
    dst_off: u64,
    len: u64,
    origin: u32,
    origin_off: u64,
}

impl TransferPlan {
    /// Origin label the final state must hold at `rank`'s destination byte `x`.
    fn expected(&self, rank: u32, x: u64) -> (u32, u64) {
        let c = self.chunk_bytes;
        let slot = (x / c) as u32;
        match self.kind {
            CollectiveKind::AllGather => (slot, x % c),
            CollectiveKind::AllToAll => (slot, u64::from(rank) * c + x % c),
        }
    }

    /// What a rank holds before any transfer: its own slot.
    fn resident(&self, rank: u32) -> Segment {
        let c = self.chunk_bytes;
        Segment {
            dst_off: u64::from(rank) * c,
            len: c,
            origin: rank,
            origin_off: match self.kind {
                CollectiveKind::AllGather => 0,
                CollectiveKind::AllToAll => u64::from(rank) * c,
            },
        }
    }

    fn check_transfer(&self, index: usize, t: &Transfer) -> Result<(), PlanError> {
        let bad = |reason: String| Err(PlanError::InvalidTransfer { index, reason });
        if t.src_gpu >= self.n_ranks || t.dst_gpu >= self.n_ranks {
            return bad(format!(
                "rank {}->{} outside 0..{}",
                t.src_gpu, t.dst_gpu, self.n_ranks
            ));
        }
        if t.src_gpu == t.dst_gpu {
            return bad(format!("source and destination are both rank {}", t.src_gpu));
        }
        if t.length == 0 {
            return bad("zero length".into());
        }
        if t.engine_id >= self.engines_per_gpu {
            return bad(format!(
                "engine {} but only {} engines",
                t.engine_id, self.engines_per_gpu
            ));
        }
        let in_bounds = |off: u64, size: u64| off.checked_add(t.length).is_some_and(|e| e <= size);
        if !in_bounds(t.src_offset, self.src_buffer_bytes) {
            return bad("source range out of bounds".into());
        }
        if !in_bounds(t.dst_offset, self.dst_buffer_bytes) {
            return bad("destination range out of bounds".into());
        }
        Ok(())
    }
}

/// Execute the plan symbolically and compare every destination byte with the
/// collective's required post-state.
pub fn validate_plan(plan: &TransferPlan) -> Result<(), PlanError> {
    if plan.n_ranks <= 1 {
        return match plan.transfers.first() {
            None => Ok(()),
            Some(_) => Err(PlanError::InvalidTransfer {
                index: 0,
                reason: "single-rank collective needs no transfers".into(),
            }),
        };
    }
    for (i, t) in plan.transfers.iter().enumerate() {
        plan.check_transfer(i, t)?;
    }

    let mut writes: Vec<Vec<Segment>> = (0..plan.n_ranks).map(|r| vec![plan.resident(r)]).collect();
    for t in &plan.transfers {
        writes[t.dst_gpu as usize].push(Segment {
            dst_off: t.dst_offset,
            len: t.length,
            origin: t.src_gpu,
            origin_off: t.src_offset,
        });
    }

    let c = plan.chunk_bytes;
    for (rank, segs) in writes.iter_mut().enumerate() {
        let rank = rank as u32;
        segs.sort_by_key(|s| (s.dst_off, s.len));
        let mut cursor = 0u64;
        for s in segs.iter() {
            if s.dst_off < cursor {
                return Err(PlanError::OverlappingWrite {
                    rank,
                    offset: s.dst_off,
                });
            }
            if s.dst_off > cursor {
                return Err(PlanError::Incomplete {
                    rank,
                    slot: cursor / c,
                });
            }
            cursor = s.dst_off + s.len;
        }
        if cursor < plan.dst_buffer_bytes {
            return Err(PlanError::Incomplete {
                rank,
                slot: cursor / c,
            });
        }
        // Both the segment and the expected layout are slope-1 within a
        // slot, so checking the first byte of each slot piece suffices.
        for s in segs.iter() {
            let mut x = s.dst_off;
            let end = s.dst_off + s.len;
            while x < end {
                let got = (s.origin, s.origin_off + (x - s.dst_off));
                if got != plan.expected(rank, x) {
                    return Err(PlanError::Mismatch { rank, slot: x / c });
                }
                x = (x / c + 1) * c;
            }
        }
    }

    let mut seqs: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for t in &plan.transfers {
        seqs.entry((t.src_gpu, t.engine_id)).or_default().push(t.seq);
    }
    for ((gpu, engine), mut s) in seqs {
        s.sort_unstable();
        if s.iter().enumerate().any(|(i, &q)| q as usize != i) {
            return Err(PlanError::SeqGap { gpu, engine });
        }
    }
    Ok(())
}

/// Completion time of a plan: serial CPU submission, per-engine FIFOs, one
/// dedicated link per ordered GPU pair, and a final completion sync.
pub fn plan_cost(plan: &TransferPlan, md: &MachineDescriptor, p: &EfficiencyParams) -> PlanCost {
    let engines = plan.engines_per_gpu.max(md.dma_engines_per_gpu) as usize;
    let mut per_engine = vec![0.0; engines];
    if plan.transfers.is_empty() {
        return PlanCost {
            total: 0.0,
            per_engine,
            wire: 0.0,
        };
    }
    let bw = p.efficiency * md.link_bandwidth_unidir;

    let mut queues: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, t) in plan.transfers.iter().enumerate() {
        queues.entry((t.src_gpu, t.engine_id)).or_default().push(i);
    }
    for q in queues.values_mut() {
        q.sort_by_key(|&i| (plan.transfers[i].seq, i));
    }
    let mut heads: BTreeMap<(u32, u32), usize> = queues.keys().map(|&k| (k, 0)).collect();
    let mut engine_free: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut link_free: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut last_end = 0.0f64;

    // List scheduling: repeatedly start the queue head that can begin first.
    for _ in 0..plan.transfers.len() {
        let mut best: Option<(f64, usize, (u32, u32))> = None;
        for (&key, &h) in &heads {
            let Some(&i) = queues[&key].get(h) else { continue };
            let t = &plan.transfers[i];
            let start = (i as f64 * md.cpu_launch_overhead)
                .max(engine_free.get(&key).copied().unwrap_or(0.0))
                .max(link_free.get(&(t.src_gpu, t.dst_gpu)).copied().unwrap_or(0.0));
            if best.is_none_or(|(s, bi, _)| start < s || (start == s && i < bi)) {
                best = Some((start, i, key));
            }
        }
        let (start, i, key) = best.expect("a queue head remains");
        let t = &plan.transfers[i];
        let end = start + t.length as f64 / bw;
        engine_free.insert(key, end);
        link_free.insert((t.src_gpu, t.dst_gpu), end);
        *heads.get_mut(&key).expect("key exists") += 1;
        let e = t.engine_id as usize;
        per_engine[e] = f64::max(per_engine[e], end);
        last_end = last_end.max(end);
    }

    let longest = plan.transfers.iter().map(|t| t.length).max().unwrap_or(0);
    PlanCost {
        total: last_end + md.dma_sync_overhead,
        per_engine,
        wire: longest as f64 / bw,
    }
}

/// Summary counts used by reports.
pub fn engines_used(plan: &TransferPlan) -> BTreeSet<u32> {
    plan.transfers.iter().map(|t| t.engine_id).collect()
}
