//! Performance model for a GEMM and a collective running concurrently on
//! one GPU: taxonomy, interference, CU partitioning, DMA-offloaded
//! collectives and a two-phase overlap simulator.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod conccl;
pub mod error;
pub mod interference;
pub mod machine;
pub mod sim;
pub mod strategy;
pub mod taxonomy;
pub mod workload;

pub use conccl::{
    plan_all_gather, plan_all_to_all, plan_collective, plan_cost, validate_plan, PlanCost,
    PlanError, Transfer, TransferPlan,
};
pub use error::{Error, Result};
pub use interference::{
    Backend, CoRunPenalty, KernelClass, PenaltyPair, SlowdownTable, SlowdownTables,
};
pub use machine::{machine_op_to_byte, MachineDescriptor, Topology};
pub use sim::{
    allocate_cus, simulate, sweep, work_conservation_check, Allocation, ModelParams,
    Phase2Policy, SimTimeline, StrategyName, SweepResult, SweepRow,
};
pub use strategy::{conccl_rp_plan, partition_heuristic, KernelRole, PartitionPlan};
pub use taxonomy::{classify_c3, fraction_of_ideal, ideal_speedup, C3Type, TaxonomyLabel};
pub use workload::{
    bundled_dataset, load_dataset, roofline_collective_time, roofline_gemm_time, Boundedness,
    C3Scenario, CollectiveKind, CollectiveOp, EfficiencyParams, GemmKernel, Source,
};
