//! Two-phase fluid simulation of a GEMM and a collective sharing one GPU.
//!
//! Phase 1 runs both kernels at interference-reduced rates until the first
//! one retires. Phase 2 runs the survivor alone.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conccl::{plan_collective, plan_cost};
use crate::error::{Error, Result};
use crate::interference::{
    comm_saturation_cus, shared_memory_factor, Backend, CoRunPenalty, KernelClass, SlowdownTables,
};
use crate::machine::MachineDescriptor;
use crate::strategy::{
    comm_isolated_time, conccl_plan, conccl_rp_plan, gemm_class, partition_heuristic,
    priority_roles, KernelRole,
};
use crate::taxonomy::{classify_c3, fraction_of_ideal, ideal_speedup, C3Type, DEFAULT_THRESHOLD};
use crate::workload::{
    collective_bandwidth_demand, gemm_bandwidth_demand, roofline_gemm_time, C3Scenario,
    CollectiveKind, EfficiencyParams,
};

const DEFAULT_PARAMS: &str = include_str!("../data/params.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Serial,
    C3Base,
    C3Sp,
    C3Rp,
    C3SpRp,
    Conccl,
    ConcclRp,
}

impl StrategyName {
    pub const ALL: [StrategyName; 7] = [
        StrategyName::Serial,
        StrategyName::C3Base,
        StrategyName::C3Sp,
        StrategyName::C3Rp,
        StrategyName::C3SpRp,
        StrategyName::Conccl,
        StrategyName::ConcclRp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Serial => "serial",
            StrategyName::C3Base => "c3_base",
            StrategyName::C3Sp => "c3_sp",
            StrategyName::C3Rp => "c3_rp",
            StrategyName::C3SpRp => "c3_sp_rp",
            StrategyName::Conccl => "conccl",
            StrategyName::ConcclRp => "conccl_rp",
        }
    }

    /// Strategies that pin CU masks on the streams for the whole run.
    pub fn is_partitioned(self) -> bool {
        matches!(
            self,
            StrategyName::C3Rp | StrategyName::C3SpRp | StrategyName::ConcclRp
        )
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown strategy `{s}`")))
    }
}

/// What the surviving kernel runs on after its partner retires.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase2Policy {
    /// Freeze for partitioned strategies, restore for the rest.
    #[default]
    Auto,
    /// Full GPU, isolated rate.
    Restore,
    /// Keep the phase-1 CU allocation (CU slowdown, no co-run penalty).
    Freeze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub roofline: EfficiencyParams,
    pub penalties: CoRunPenalty,
    #[serde(default)]
    pub phase2: Phase2Policy,
    /// Stretch co-runners when their combined HBM demand exceeds the
    /// effective peak.
    #[serde(default = "yes")]
    pub memory_contention: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            roofline: EfficiencyParams::default(),
            penalties: CoRunPenalty::default(),
            phase2: Phase2Policy::Auto,
            memory_contention: true,
        }
    }
}

impl ModelParams {
    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_PARAMS).expect("bundled params are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(Error::json("model params"))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.roofline.validate()?;
        self.penalties.validate()
    }
}

/// Inputs with every interference source and overhead removed.
pub fn zero_interference(
    md: &MachineDescriptor,
    params: &ModelParams,
) -> (MachineDescriptor, SlowdownTables, ModelParams) {
    let mut md = md.clone();
    md.cpu_launch_overhead = 0.0;
    md.dma_sync_overhead = 0.0;
    let params = ModelParams {
        roofline: EfficiencyParams {
            comm_launch_overhead_cu: 0.0,
            ..params.roofline
        },
        penalties: CoRunPenalty::unity(),
        phase2: params.phase2,
        memory_contention: false,
    };
    let tables = SlowdownTables::unity(&md);
    (md, tables, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub backend: Backend,
    pub cus_gemm: u32,
    pub cus_comm: u32,
    pub cus_idle: u32,
    pub order: Vec<KernelRole>,
}

/// CU split each strategy produces. Serial reports the full GPU for both
/// kernels since they never overlap.
pub fn allocate_cus(
    s: &C3Scenario,
    strategy: StrategyName,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    p: &EfficiencyParams,
) -> Result<Allocation> {
    let cus = md.cus_per_gpu;
    let grain = md.min_cu_grain;
    let gemm_first = vec![KernelRole::Gemm, KernelRole::Comm];
    let alloc = match strategy {
        StrategyName::Serial => Allocation {
            backend: Backend::Cu,
            cus_gemm: cus,
            cus_comm: cus,
            cus_idle: 0,
            order: gemm_first,
        },
        StrategyName::C3Base => {
            // The GEMM launches first and grabs what its workgroups can fill;
            // the collective gets what is left, at least one grain.
            let wg = s.gemm.workgroups().min(u64::from(cus)) as u32;
            let greedy = md.round_up_to_grain(wg).min(cus);
            let cus_comm = (cus - greedy).max(grain);
            Allocation {
                backend: Backend::Cu,
                cus_gemm: cus - cus_comm,
                cus_comm,
                cus_idle: 0,
                order: gemm_first,
            }
        }
        StrategyName::C3Sp => {
            let sat = comm_saturation_cus(s.collective.kind);
            let cus_comm = md.round_up_to_grain(sat).min(cus - grain);
            Allocation {
                backend: Backend::Cu,
                cus_gemm: cus - cus_comm,
                cus_comm,
                cus_idle: 0,
                order: priority_roles(s),
            }
        }
        StrategyName::C3Rp | StrategyName::C3SpRp => {
            let plan = partition_heuristic(s, md, tables, p)?;
            Allocation {
                backend: Backend::Cu,
                cus_gemm: plan.cus_gemm,
                cus_comm: plan.cus_comm,
                cus_idle: 0,
                order: if strategy == StrategyName::C3SpRp {
                    plan.schedule_order
                } else {
                    gemm_first
                },
            }
        }
        StrategyName::Conccl | StrategyName::ConcclRp => {
            let plan = if strategy == StrategyName::ConcclRp {
                conccl_rp_plan(s, md, tables, p)?
            } else {
                conccl_plan(s, md, tables, p)?
            };
            Allocation {
                backend: Backend::Dma,
                cus_gemm: plan.cus_gemm,
                cus_comm: 0,
                cus_idle: plan.cus_idle,
                order: plan.schedule_order,
            }
        }
    };
    Ok(alloc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelExec {
    pub role: KernelRole,
    /// Seconds of isolated full-GPU execution.
    pub work: f64,
    pub cus: u32,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub start: f64,
    pub end: f64,
    /// Progress per second for each kernel, indexed like `SimTimeline::kernels`.
    pub rates: Vec<f64>,
    pub cus: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTimeline {
    pub scenario_id: String,
    pub collective: CollectiveKind,
    pub strategy: StrategyName,
    pub taxonomy: C3Type,
    pub t_gemm: f64,
    pub t_comm: f64,
    pub kernels: Vec<KernelExec>,
    pub phases: Vec<Phase>,
    pub makespan: f64,
    pub serial_time: f64,
    pub speedup: f64,
    pub ideal: f64,
    pub fraction_of_ideal: f64,
}

fn positive(what: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::NonPositive { what, value: v })
    }
}

pub fn simulate(
    s: &C3Scenario,
    strategy: StrategyName,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    params: &ModelParams,
) -> Result<SimTimeline> {
    let alloc = allocate_cus(s, strategy, md, tables, &params.roofline)?;
    simulate_with_allocation(s, strategy, &alloc, md, tables, params)
}

/// Run `strategy`'s execution model on a caller-chosen allocation. Used to
/// evaluate allocations the heuristics did not pick.
pub fn simulate_with_allocation(
    s: &C3Scenario,
    strategy: StrategyName,
    alloc: &Allocation,
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    params: &ModelParams,
) -> Result<SimTimeline> {
    Prepared::new(s, strategy, alloc, md, tables, params)?.run(&params.penalties, params.phase2)
}

/// Everything about a run that does not depend on co-run penalties or the
/// phase-2 policy.
#[derive(Debug, Clone)]
pub struct Prepared {
    scenario_id: String,
    collective: CollectiveKind,
    strategy: StrategyName,
    taxonomy: C3Type,
    t_g: f64,
    t_c: f64,
    ideal: f64,
    full_cus: u32,
    backend: Backend,
    cus: [u32; 2],
    classes: [KernelClass; 2],
    works: [f64; 2],
    cu_slowdowns: [f64; 2],
    memory: [f64; 2],
}

impl Prepared {
    pub fn new(
        s: &C3Scenario,
        strategy: StrategyName,
        alloc: &Allocation,
        md: &MachineDescriptor,
        tables: &SlowdownTables,
        params: &ModelParams,
    ) -> Result<Self> {
        let p = &params.roofline;
        let t_g = positive("GEMM time", roofline_gemm_time(&s.gemm, md, p))?;
        let t_c = positive("communication time", comm_isolated_time(s, md, p)?)?;
        let ideal = ideal_speedup(t_g, t_c)?;
        let taxonomy = classify_c3(t_g, t_c, DEFAULT_THRESHOLD)?.value;
        let g_class = gemm_class(s, md)?;
        let c_class = KernelClass::collective(s.collective.kind);

        let comm_work = match alloc.backend {
            Backend::Cu => t_c,
            Backend::Dma => {
                let plan = plan_collective(&s.collective, md)?;
                positive("DMA collective time", plan_cost(&plan, md, p).total)?
            }
        };
        let (s_g, s_c, memory) = if strategy == StrategyName::Serial {
            (1.0, 1.0, [1.0, 1.0])
        } else {
            let s_g = tables.slowdown(g_class, f64::from(alloc.cus_gemm))?;
            let s_c = match alloc.backend {
                Backend::Cu => tables.slowdown(c_class, f64::from(alloc.cus_comm))?,
                Backend::Dma => 1.0,
            };
            let memory = if params.memory_contention {
                let d_g = gemm_bandwidth_demand(&s.gemm, md, p)? / s_g;
                let d_c = match collective_bandwidth_demand(&s.collective, md, p) {
                    Ok(d) => d / s_c,
                    Err(_) => 0.0,
                };
                let f = shared_memory_factor(&[d_g, d_c], p.efficiency * md.hbm_bandwidth)?;
                [f[0], f[1]]
            } else {
                [1.0, 1.0]
            };
            (s_g, s_c, memory)
        };
        Ok(Self {
            scenario_id: s.id.clone(),
            collective: s.collective.kind,
            strategy,
            taxonomy,
            t_g,
            t_c,
            ideal,
            full_cus: md.cus_per_gpu,
            backend: alloc.backend,
            cus: [alloc.cus_gemm, alloc.cus_comm],
            classes: [g_class, c_class],
            works: [t_g, comm_work],
            cu_slowdowns: [s_g, s_c],
            memory,
        })
    }

    pub fn run(&self, penalties: &CoRunPenalty, phase2: Phase2Policy) -> Result<SimTimeline> {
        let [t_g, comm_work] = self.works;
        let serial_time = self.t_g + self.t_c;
        let kernels = vec![
            KernelExec {
                role: KernelRole::Gemm,
                work: t_g,
                cus: self.cus[0],
                backend: Backend::Cu,
            },
            KernelExec {
                role: KernelRole::Comm,
                work: comm_work,
                cus: self.cus[1],
                backend: self.backend,
            },
        ];

        let (phases, makespan) = if self.strategy == StrategyName::Serial {
            let full = self.full_cus;
            let phases = vec![
                Phase {
                    start: 0.0,
                    end: t_g,
                    rates: vec![1.0, 0.0],
                    cus: vec![full, 0],
                },
                Phase {
                    start: t_g,
                    end: serial_time,
                    rates: vec![0.0, 1.0],
                    cus: vec![0, full],
                },
            ];
            (phases, serial_time)
        } else {
            self.overlap(penalties, phase2)?
        };

        let speedup = serial_time / makespan;
        let fraction = fraction_of_ideal(speedup, self.ideal)?.clamp(0.0, 1.0);
        Ok(SimTimeline {
            scenario_id: self.scenario_id.clone(),
            collective: self.collective,
            strategy: self.strategy,
            taxonomy: self.taxonomy,
            t_gemm: self.t_g,
            t_comm: self.t_c,
            kernels,
            phases,
            makespan,
            serial_time,
            speedup,
            ideal: self.ideal,
            fraction_of_ideal: fraction,
        })
    }

    fn overlap(&self, penalties: &CoRunPenalty, phase2: Phase2Policy) -> Result<(Vec<Phase>, f64)> {
        let [s_g, s_c] = self.cu_slowdowns;
        // Residual interference scales with how hard the partner is
        // actually driving the memory system.
        let pen_g = scaled_penalty(penalties.get(self.classes[0], self.backend)?, s_c);
        let pen_c = scaled_penalty(penalties.get(self.classes[1], self.backend)?, s_g);
        let r_g = positive("GEMM rate", 1.0 / (s_g * self.memory[0] * pen_g))?;
        let r_c = positive("communication rate", 1.0 / (s_c * self.memory[1] * pen_c))?;
        let rates = [r_g, r_c];

        let finish = [self.works[0] / r_g, self.works[1] / r_c];
        let t1 = finish[0].min(finish[1]);
        let mut phases = vec![Phase {
            start: 0.0,
            end: t1,
            rates: rates.to_vec(),
            cus: self.cus.to_vec(),
        }];

        let frozen = match phase2 {
            Phase2Policy::Auto => self.strategy.is_partitioned(),
            Phase2Policy::Restore => false,
            Phase2Policy::Freeze => true,
        };
        let survivor = match finish[0].partial_cmp(&finish[1]) {
            Some(std::cmp::Ordering::Greater) => Some(0),
            Some(std::cmp::Ordering::Less) => Some(1),
            _ => None,
        };
        let mut end = t1;
        if let Some(idx) = survivor {
            let remaining = self.works[idx] - rates[idx] * t1;
            let rate = if frozen { 1.0 / self.cu_slowdowns[idx] } else { 1.0 };
            let rate = positive("phase-2 rate", rate)?;
            end = t1 + remaining / rate;
            let mut phase_rates = vec![0.0, 0.0];
            phase_rates[idx] = rate;
            let mut cus = vec![0, 0];
            cus[idx] = if frozen || (idx == 1 && self.backend == Backend::Dma) {
                self.cus[idx]
            } else {
                self.full_cus
            };
            phases.push(Phase {
                start: t1,
                end,
                rates: phase_rates,
                cus,
            });
        }
        Ok((phases, end))
    }
}

fn scaled_penalty(p: f64, partner_slowdown: f64) -> f64 {
    1.0 + (p - 1.0) * (1.0 / partner_slowdown).min(1.0)
}

/// Integrated progress of each kernel must equal its work.
pub fn work_conservation_check(timeline: &SimTimeline, kernels: &[KernelExec]) -> Result<()> {
    for (i, k) in kernels.iter().enumerate() {
        let integrated: f64 = timeline
            .phases
            .iter()
            .map(|ph| (ph.end - ph.start) * ph.rates.get(i).copied().unwrap_or(0.0))
            .sum();
        if (integrated - k.work).abs() > 1e-9 * k.work.abs() {
            return Err(Error::WorkNotConserved {
                kernel: k.role.to_string(),
                integrated,
                work: k.work,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario_id: String,
    pub collective: CollectiveKind,
    pub taxonomy: C3Type,
    pub strategy: StrategyName,
    pub makespan_s: f64,
    pub speedup: f64,
    pub ideal: f64,
    pub fraction_of_ideal: f64,
}

impl From<&SimTimeline> for SweepRow {
    fn from(t: &SimTimeline) -> Self {
        Self {
            scenario_id: t.scenario_id.clone(),
            collective: t.collective,
            taxonomy: t.taxonomy,
            strategy: t.strategy,
            makespan_s: t.makespan,
            speedup: t.speedup,
            ideal: t.ideal,
            fraction_of_ideal: t.fraction_of_ideal,
        }
    }
}

/// Mean fraction-of-ideal for one strategy over a group of rows.
/// `None` in a key column means "all".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: StrategyName,
    pub collective: Option<CollectiveKind>,
    pub taxonomy: Option<C3Type>,
    pub count: usize,
    pub mean_fraction_of_ideal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<Aggregate>,
}

pub const ROW_HEADER: [&str; 8] = [
    "scenario_id",
    "collective",
    "taxonomy",
    "strategy",
    "makespan_s",
    "speedup",
    "ideal",
    "fraction_of_ideal",
];

pub const AGGREGATE_HEADER: [&str; 5] = [
    "strategy",
    "collective",
    "taxonomy",
    "count",
    "mean_fraction_of_ideal",
];

impl SweepResult {
    pub fn rows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ROW_HEADER).expect("in-memory CSV write");
        for r in &self.rows {
            w.write_record([
                r.scenario_id.clone(),
                r.collective.to_string(),
                r.taxonomy.to_string(),
                r.strategy.to_string(),
                r.makespan_s.to_string(),
                r.speedup.to_string(),
                r.ideal.to_string(),
                r.fraction_of_ideal.to_string(),
            ])
            .expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("CSV is UTF-8")
    }

    pub fn aggregates_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(AGGREGATE_HEADER).expect("in-memory CSV write");
        for a in &self.aggregates {
            w.write_record([
                a.strategy.to_string(),
                a.collective.map_or("all".into(), |c| c.to_string()),
                a.taxonomy.map_or("all".into(), |t| t.to_string()),
                a.count.to_string(),
                a.mean_fraction_of_ideal.to_string(),
            ])
            .expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("CSV is UTF-8")
    }

    /// Overall mean fraction for `strategy`, if any rows exist.
    pub fn overall_mean(&self, strategy: StrategyName) -> Option<f64> {
        self.mean(strategy, None, None)
    }

    pub fn mean(
        &self,
        strategy: StrategyName,
        collective: Option<CollectiveKind>,
        taxonomy: Option<C3Type>,
    ) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.strategy == strategy && a.collective == collective && a.taxonomy == taxonomy)
            .map(|a| a.mean_fraction_of_ideal)
    }
}

/// Simulate every (scenario, strategy) pair. Rows are ordered by scenario
/// id, collective, then strategy.
pub fn sweep(
    scenarios: &[C3Scenario],
    strategies: &[StrategyName],
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    params: &ModelParams,
) -> Result<SweepResult> {
    let mut timelines = Vec::with_capacity(scenarios.len() * strategies.len());
    for s in scenarios {
        for &st in strategies {
            timelines.push(simulate(s, st, md, tables, params)?);
        }
    }
    Ok(summarize(&timelines))
}

pub fn summarize(timelines: &[SimTimeline]) -> SweepResult {
    let mut rows: Vec<SweepRow> = timelines.iter().map(SweepRow::from).collect();
    rows.sort_by(|a, b| {
        (a.scenario_id.as_str(), a.collective, a.strategy).cmp(&(
            b.scenario_id.as_str(),
            b.collective,
            b.strategy,
        ))
    });

    type Key = (StrategyName, Option<CollectiveKind>, Option<C3Type>);
    let mut groups: BTreeMap<Key, (usize, f64)> = BTreeMap::new();
    for r in &rows {
        for key in [
            (r.strategy, Some(r.collective), Some(r.taxonomy)),
            (r.strategy, Some(r.collective), None),
            (r.strategy, None, None),
        ] {
            let e = groups.entry(key).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += r.fraction_of_ideal;
        }
    }
    let aggregates = groups
        .into_iter()
        .map(|((strategy, collective, taxonomy), (count, sum))| Aggregate {
            strategy,
            collective,
            taxonomy,
            count,
            mean_fraction_of_ideal: sum / count as f64,
        })
        .collect();
    SweepResult { rows, aggregates }
}
