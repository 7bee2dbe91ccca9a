//! Runtime heuristics: launch ordering, CU partitioning, and the ConCCL_rp
//! idle-CU rule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conccl::{plan_collective, plan_cost};
use crate::error::{Error, Result};
use crate::interference::{Backend, KernelClass, SlowdownTables};
use crate::machine::{machine_op_to_byte, MachineDescriptor};
use crate::workload::{
    classify_gemm_boundedness, roofline_collective_time, roofline_gemm_time,
    C3Scenario, EfficiencyParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelRole {
    Gemm,
    Comm,
}

impl fmt::Display for KernelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelRole::Gemm => "gemm",
            KernelRole::Comm => "comm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledKernel {
    pub role: KernelRole,
    pub workgroups: u64,
}

/// Fewest workgroups first; on a tie the collective goes first.
pub fn schedule_priority_order(kernels: &[ScheduledKernel]) -> Vec<ScheduledKernel> {
    let mut out = kernels.to_vec();
    out.sort_by_key(|k| (k.workgroups, k.role != KernelRole::Comm));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cus_comm: u32,
    pub cus_gemm: u32,
    pub gemm_time: f64,
    pub comm_time: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub comm_backend: Backend,
    pub cus_comm: u32,
    pub cus_gemm: u32,
    pub cus_idle: u32,
    pub schedule_order: Vec<KernelRole>,
    pub predicted_makespan: f64,
    /// Every allocation the heuristic considered, for audit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

impl PartitionPlan {
    pub fn validate(&self, md: &MachineDescriptor) -> Result<()> {
        let sum = self.cus_comm + self.cus_gemm + self.cus_idle;
        if sum != md.cus_per_gpu {
            return Err(Error::InvalidParams(format!(
                "plan assigns {sum} CUs, machine has {}",
                md.cus_per_gpu
            )));
        }
        let g = md.min_cu_grain;
        if [self.cus_comm, self.cus_gemm, self.cus_idle].iter().any(|c| c % g != 0) {
            return Err(Error::InvalidParams(format!(
                "plan CU counts must be multiples of {g}"
            )));
        }
        if self.comm_backend == Backend::Cu && self.cus_comm < g {
            return Err(Error::InvalidParams(
                "CU-backend collective needs at least one CU grain".into(),
            ));
        }
        if self.cus_gemm < g {
            return Err(Error::InvalidParams("GEMM needs at least one CU grain".into()));
        }
        Ok(())
    }
}

pub fn gemm_class(s: &C3Scenario, md: &MachineDescriptor) -> Result<KernelClass> {
    let ratio = machine_op_to_byte(md)?;
    Ok(KernelClass::gemm(classify_gemm_boundedness(&s.gemm, ratio)))
}

/// Power-of-two comm reservations from the grain up, leaving the GEMM at
/// least one grain.
pub fn partition_candidates(md: &MachineDescriptor) -> Vec<u32> {
    let limit = md.cus_per_gpu.saturating_sub(md.min_cu_grain);
    std::iter::successors(Some(md.min_cu_grain), |&c| c.checked_mul(2))
        .take_while(|&c| c <= limit)
        .collect()
}

/// Predicted overlap time for every candidate reservation.
pub fn partition_sweep(
    s: &C3Scenario,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    p: &EfficiencyParams,
) -> Result<Vec<Candidate>> {
    let gemm_table = tables.get(gemm_class(s, md)?)?;
    let comm_table = tables.get(KernelClass::collective(s.collective.kind))?;
    let t_g = roofline_gemm_time(&s.gemm, md, p);
    let t_c = comm_isolated_time(s, md, p)?;
    partition_candidates(md)
        .into_iter()
        .map(|c| {
            let cus_gemm = md.cus_per_gpu - c;
            let gemm_time = t_g * gemm_table.slowdown_at(f64::from(cus_gemm))?;
            let comm_time = t_c * comm_table.slowdown_at(f64::from(c))?;
            Ok(Candidate {
                cus_comm: c,
                cus_gemm,
                gemm_time,
                comm_time,
                predicted: gemm_time.max(comm_time),
            })
        })
        .collect()
}

/// Isolated CU-collective time including its launch cost, or the measured time.
pub fn comm_isolated_time(s: &C3Scenario, md: &MachineDescriptor, p: &EfficiencyParams) -> Result<f64> {
    match s.collective.measured_time {
        Some(t) => Ok(t),
        None => roofline_collective_time(&s.collective, md, p, true),
    }
}

/// Launch order under schedule prioritization.
pub fn priority_roles(s: &C3Scenario) -> Vec<KernelRole> {
    let kernels = [
        ScheduledKernel {
            role: KernelRole::Gemm,
            workgroups: s.gemm.workgroups(),
        },
        ScheduledKernel {
            role: KernelRole::Comm,
            workgroups: s.collective.workgroups(),
        },
    ];
    schedule_priority_order(&kernels).into_iter().map(|k| k.role).collect()
}

/// Choose the comm reservation minimizing max(GEMM, comm) predicted time;
/// ties go to the smaller reservation.
pub fn partition_heuristic(
    s: &C3Scenario,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    p: &EfficiencyParams,
) -> Result<PartitionPlan> {
    let candidates = partition_sweep(s, md, tables, p)?;
    let best = candidates
        .iter()
        .copied()
        .reduce(|a, b| if b.predicted < a.predicted { b } else { a })
        .ok_or_else(|| Error::InvalidMachine("machine too small to partition".into()))?;
    Ok(PartitionPlan {
        comm_backend: Backend::Cu,
        cus_comm: best.cus_comm,
        cus_gemm: best.cus_gemm,
        cus_idle: 0,
        schedule_order: priority_roles(s),
        predicted_makespan: best.predicted,
        candidates,
    })
}

/// DMA-offloaded collective; a memory-bound GEMM leaves one grain idle.
pub fn conccl_rp_plan(
    s: &C3Scenario,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    p: &EfficiencyParams,
) -> Result<PartitionPlan> {
    let class = gemm_class(s, md)?;
    let idle = match class {
        KernelClass::GemmMemoryBound if md.cus_per_gpu > md.min_cu_grain => md.min_cu_grain,
        _ => 0,
    };
    dma_plan(s, md, tables, p, class, idle)
}

/// DMA-offloaded collective with every CU given to the GEMM.
pub fn conccl_plan(
    s: &C3Scenario,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    p: &EfficiencyParams,
) -> Result<PartitionPlan> {
    dma_plan(s, md, tables, p, gemm_class(s, md)?, 0)
}

fn dma_plan(
    s: &C3Scenario,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    p: &EfficiencyParams,
    class: KernelClass,
    cus_idle: u32,
) -> Result<PartitionPlan> {
    let cus_gemm = md.cus_per_gpu - cus_idle;
    let t_g = roofline_gemm_time(&s.gemm, md, p) * tables.slowdown(class, f64::from(cus_gemm))?;
    let t_dma = plan_cost(&plan_collective(&s.collective, md)?, md, p).total;
    Ok(PartitionPlan {
        comm_backend: Backend::Dma,
        cus_comm: 0,
        cus_gemm,
        cus_idle,
        schedule_order: vec![KernelRole::Comm, KernelRole::Gemm],
        predicted_makespan: t_g.max(t_dma),
        candidates: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{bundled_dataset, CollectiveKind};

    fn scenario(id: &str, kind: CollectiveKind) -> C3Scenario {
        bundled_dataset()
            .into_iter()
            .find(|s| s.id == id && s.collective.kind == kind)
            .unwrap()
    }

    fn defaults() -> (MachineDescriptor, SlowdownTables, EfficiencyParams) {
        (
            MachineDescriptor::mi300x(),
            SlowdownTables::mi300x(),
            EfficiencyParams::default(),
        )
    }

    fn k(role: KernelRole, workgroups: u64) -> ScheduledKernel {
        ScheduledKernel { role, workgroups }
    }

    #[test]
    fn priority_order() {
        let order = schedule_priority_order(&[k(KernelRole::Gemm, 4096), k(KernelRole::Comm, 64)]);
        assert_eq!(order[0].role, KernelRole::Comm);
        let one = schedule_priority_order(&[k(KernelRole::Gemm, 7)]);
        assert_eq!(one, vec![k(KernelRole::Gemm, 7)]);
        let tie = schedule_priority_order(&[k(KernelRole::Gemm, 64), k(KernelRole::Comm, 64)]);
        assert_eq!(tie[0].role, KernelRole::Comm);
        let small = schedule_priority_order(&[k(KernelRole::Comm, 64), k(KernelRole::Gemm, 2)]);
        assert_eq!(small[0].role, KernelRole::Gemm);
    }

    #[test]
    fn candidates_for_mi300x() {
        let md = MachineDescriptor::mi300x();
        assert_eq!(partition_candidates(&md), vec![8, 16, 32, 64, 128, 256]);
    }

    #[test]
    fn cb1_partitions() {
        let (md, t, p) = defaults();
        let ag = partition_heuristic(&scenario("cb1_896M", CollectiveKind::AllGather), &md, &t, &p).unwrap();
        assert_eq!(ag.cus_comm, 32);
        assert_eq!(ag.candidates.len(), 6);
        ag.validate(&md).unwrap();
        let a2a = partition_heuristic(&scenario("cb1_896M", CollectiveKind::AllToAll), &md, &t, &p).unwrap();
        assert_eq!(a2a.cus_comm, 64);
        assert_eq!(a2a.cus_gemm, 240);
    }

    #[test]
    fn zero_payload_takes_minimum_grain() {
        let (md, t, _) = defaults();
        let p = EfficiencyParams {
            comm_launch_overhead_cu: 0.0,
            ..EfficiencyParams::default()
        };
        let mut s = scenario("cb1_896M", CollectiveKind::AllGather);
        s.collective.payload_bytes = 0;
        let plan = partition_heuristic(&s, &md, &t, &p).unwrap();
        assert_eq!(plan.cus_comm, 8);
    }

    #[test]
    fn missing_table_is_an_error() {
        let (md, _, p) = defaults();
        let t = SlowdownTables::new([]);
        let s = scenario("cb1_896M", CollectiveKind::AllGather);
        assert!(matches!(partition_heuristic(&s, &md, &t, &p), Err(Error::MissingTable(_))));
    }

    #[test]
    fn conccl_rp_rule() {
        let (md, t, p) = defaults();
        let mb = conccl_rp_plan(&scenario("mb1_896M", CollectiveKind::AllGather), &md, &t, &p).unwrap();
        assert_eq!((mb.cus_gemm, mb.cus_idle, mb.cus_comm), (296, 8, 0));
        assert_eq!(mb.comm_backend, Backend::Dma);
        mb.validate(&md).unwrap();
        let cb = conccl_rp_plan(&scenario("cb1_896M", CollectiveKind::AllGather), &md, &t, &p).unwrap();
        assert_eq!((cb.cus_gemm, cb.cus_idle), (304, 0));
    }

    #[test]
    fn conccl_rp_on_toy_machine() {
        let mut md = MachineDescriptor::mi300x();
        md.cus_per_gpu = 16;
        md.xcds_per_gpu = 2;
        md.cus_per_xcd = 8;
        let (_, _, p) = defaults();
        let tables = SlowdownTables::unity(&md);
        let s = scenario("mb1_896M", CollectiveKind::AllGather);
        let plan = conccl_rp_plan(&s, &md, &tables, &p).unwrap();
        assert_eq!(plan.cus_gemm, 8);
        plan.validate(&md).unwrap();
        assert_eq!(partition_candidates(&md), vec![8]);
    }

    #[test]
    fn plan_validation() {
        let md = MachineDescriptor::mi300x();
        let mut plan = PartitionPlan {
            comm_backend: Backend::Cu,
            cus_comm: 0,
            cus_gemm: 304,
            cus_idle: 0,
            schedule_order: vec![KernelRole::Comm, KernelRole::Gemm],
            predicted_makespan: 1.0,
            candidates: vec![],
        };
        assert!(plan.validate(&md).is_err());
        plan.comm_backend = Backend::Dma;
        plan.validate(&md).unwrap();
        plan.cus_gemm = 300;
        plan.cus_idle = 4;
        assert!(plan.validate(&md).is_err());
    }
}
