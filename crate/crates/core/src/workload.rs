//! GEMM and collective workloads, their roofline costs, and the bundled
//! scenario dataset.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{MachineDescriptor, Topology};
use crate::taxonomy::C3Type;

const BUNDLED_SCENARIOS: &str = include_str!("../data/c3-scenarios.json");

/// Default output tile used to turn GEMM dimensions into a workgroup count.
pub const GEMM_TILE: u64 = 128;

/// Launch-time CU footprint of CU-based collectives.
pub const ALL_GATHER_DEFAULT_WORKGROUPS: u64 = 64;
pub const ALL_TO_ALL_DEFAULT_WORKGROUPS: u64 = 56;

/// Fraction of all-to-all memory traffic an equal-size all-gather generates.
pub const ALL_GATHER_TRAFFIC_RATIO: f64 = 0.86;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundedness {
    ComputeBound,
    MemoryBound,
}

impl fmt::Display for Boundedness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundedness::ComputeBound => "compute-bound",
            Boundedness::MemoryBound => "memory-bound",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommBoundedness {
    LatencyBound,
    BandwidthBound,
}

impl fmt::Display for CommBoundedness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommBoundedness::LatencyBound => "latency-bound",
            CommBoundedness::BandwidthBound => "bandwidth-bound",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemmKernel {
    pub tag: String,
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub dtype_bytes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_op_to_byte: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundedness_override: Option<Boundedness>,
}

impl GemmKernel {
    pub fn new(tag: impl Into<String>, m: u64, n: u64, k: u64, dtype_bytes: u32) -> Self {
        Self {
            tag: tag.into(),
            m,
            n,
            k,
            dtype_bytes,
            measured_op_to_byte: None,
            measured_time: None,
            boundedness_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::InvalidWorkload(format!(
                "GEMM `{}` has a zero dimension ({}x{}x{})",
                self.tag, self.m, self.n, self.k
            )));
        }
        if !matches!(self.dtype_bytes, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidWorkload(format!(
                "GEMM `{}` has unsupported dtype size {}",
                self.tag, self.dtype_bytes
            )));
        }
        if let Some(t) = self.measured_time {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidWorkload(format!(
                    "GEMM `{}` measured_time must be positive",
                    self.tag
                )));
            }
        }
        Ok(())
    }

    /// Multiply-add count, 2mnk.
    pub fn flops(&self) -> f64 {
        2.0 * (self.m as f64) * (self.n as f64) * (self.k as f64)
    }

    /// Compulsory traffic: read both operands once, write the result once.
    pub fn min_bytes(&self) -> f64 {
        let elems = self.m * self.k + self.k * self.n + self.m * self.n;
        (elems as f64) * f64::from(self.dtype_bytes)
    }

    pub fn workgroups(&self) -> u64 {
        self.workgroups_with_tile(GEMM_TILE, GEMM_TILE)
    }

    pub fn workgroups_with_tile(&self, tile_m: u64, tile_n: u64) -> u64 {
        self.m.div_ceil(tile_m) * self.n.div_ceil(tile_n)
    }
}

pub fn gemm_flops(g: &GemmKernel) -> f64 {
    g.flops()
}

pub fn gemm_min_bytes(g: &GemmKernel) -> f64 {
    g.min_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    AllGather,
    AllToAll,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 2] = [CollectiveKind::AllGather, CollectiveKind::AllToAll];

    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllGather => "all-gather",
            CollectiveKind::AllToAll => "all-to-all",
        }
    }

    /// Read+write bytes moved per wire byte, relative to the payload
    /// leaving each GPU.
    pub fn traffic_factor(self) -> f64 {
        match self {
            CollectiveKind::AllToAll => 2.0,
            CollectiveKind::AllGather => 2.0 * ALL_GATHER_TRAFFIC_RATIO,
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-gather" => Ok(CollectiveKind::AllGather),
            "all-to-all" => Ok(CollectiveKind::AllToAll),
            other => Err(Error::InvalidWorkload(format!("unknown collective `{other}`"))),
        }
    }
}

/// A collective over `n_ranks` GPUs.
///
/// For all-gather `payload_bytes` is the gathered result held by each rank
/// (each contributes `payload_bytes / n_ranks`). For all-to-all it is each
/// rank's send buffer (`payload_bytes / n_ranks` per peer). Both conventions
/// put the same number of bytes on every link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectiveOp {
    pub kind: CollectiveKind,
    pub payload_bytes: u64,
    pub n_ranks: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_time: Option<f64>,
}

impl CollectiveOp {
    pub fn new(kind: CollectiveKind, payload_bytes: u64, n_ranks: u32) -> Self {
        Self {
            kind,
            payload_bytes,
            n_ranks,
            measured_time: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ranks == 0 {
            return Err(Error::InvalidWorkload("collective needs at least one rank".into()));
        }
        if !self.payload_bytes.is_multiple_of(u64::from(self.n_ranks)) {
            return Err(Error::InvalidWorkload(format!(
                "payload of {} bytes is not divisible by {} ranks",
                self.payload_bytes, self.n_ranks
            )));
        }
        if let Some(t) = self.measured_time {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidWorkload(
                    "collective measured_time must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Bytes each rank sends to each peer.
    pub fn chunk_bytes(&self) -> u64 {
        self.payload_bytes / u64::from(self.n_ranks.max(1))
    }

    pub fn workgroups(&self) -> u64 {
        match self.kind {
            CollectiveKind::AllGather => ALL_GATHER_DEFAULT_WORKGROUPS,
            CollectiveKind::AllToAll => ALL_TO_ALL_DEFAULT_WORKGROUPS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum KernelRef<'a> {
    Gemm(&'a GemmKernel),
    Collective(&'a CollectiveOp),
}

/// Workgroup count used as a proxy for a kernel's CU appetite.
pub fn estimate_workgroups(kernel: KernelRef<'_>) -> u64 {
    match kernel {
        KernelRef::Gemm(g) => g.workgroups(),
        KernelRef::Collective(c) => c.workgroups(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Model(String),
    Synthetic,
}

impl From<String> for Source {
    fn from(s: String) -> Self {
        if s == "synthetic" {
            Source::Synthetic
        } else {
            Source::Model(s)
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> Self {
        match s {
            Source::Model(name) => name,
            Source::Synthetic => "synthetic".into(),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Source::Model(name) => serializer.serialize_str(name),
            Source::Synthetic => serializer.serialize_str("synthetic"),
        }
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer).map(Source::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C3Scenario {
    pub id: String,
    pub gemm: GemmKernel,
    pub collective: CollectiveOp,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_taxonomy: Option<C3Type>,
}

impl C3Scenario {
    /// `id` plus collective, unique within a dataset.
    pub fn key(&self) -> String {
        format!("{}/{}", self.id, self.collective.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyParams {
    /// Achievable fraction of every peak rate.
    pub efficiency: f64,
    /// Fixed cost of a CU-based collective launch, seconds.
    pub comm_launch_overhead_cu: f64,
}

impl Default for EfficiencyParams {
    fn default() -> Self {
        Self {
            efficiency: 0.7,
            comm_launch_overhead_cu: 50e-6,
        }
    }
}

impl EfficiencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "efficiency must be in (0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.comm_launch_overhead_cu.is_finite() && self.comm_launch_overhead_cu >= 0.0) {
            return Err(Error::InvalidParams(
                "comm_launch_overhead_cu must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

pub fn classify_gemm_boundedness(g: &GemmKernel, machine_ratio: f64) -> Boundedness {
    if let Some(b) = g.boundedness_override {
        return b;
    }
    let ratio = g
        .measured_op_to_byte
        .unwrap_or_else(|| g.flops() / g.min_bytes());
    if ratio > machine_ratio {
        Boundedness::ComputeBound
    } else {
        Boundedness::MemoryBound
    }
}

/// Latency-bound when the fixed launch cost dominates the wire time.
pub fn classify_collective_boundedness(
    c: &CollectiveOp,
    md: &MachineDescriptor,
    p: &EfficiencyParams,
) -> Result<CommBoundedness> {
    let wire = roofline_collective_time(c, md, p, false)?;
    if p.comm_launch_overhead_cu >= wire && p.comm_launch_overhead_cu > 0.0 {
        Ok(CommBoundedness::LatencyBound)
    } else {
        Ok(CommBoundedness::BandwidthBound)
    }
}

pub fn roofline_gemm_time(g: &GemmKernel, md: &MachineDescriptor, p: &EfficiencyParams) -> f64 {
    if let Some(t) = g.measured_time {
        return t;
    }
    let compute = g.flops() / (p.efficiency * md.peak_compute_flops);
    let memory = g.min_bytes() / (p.efficiency * md.hbm_bandwidth);
    compute.max(memory)
}

/// Direct-algorithm wire time: every rank pushes its chunk to each peer over
/// a dedicated link, all links in parallel.
pub fn roofline_collective_time(
    c: &CollectiveOp,
    md: &MachineDescriptor,
    p: &EfficiencyParams,
    include_overhead: bool,
) -> Result<f64> {
    if c.n_ranks > md.gpus_per_node {
        return Err(Error::TooManyRanks {
            n_ranks: c.n_ranks,
            gpus: md.gpus_per_node,
        });
    }
    match md.topology {
        Topology::FullyConnected => {}
    }
    if c.n_ranks <= 1 {
        return Ok(0.0);
    }
    let per_link = c.chunk_bytes() as f64;
    let wire = per_link / (p.efficiency * md.link_bandwidth_unidir);
    Ok(if include_overhead {
        wire + p.comm_launch_overhead_cu
    } else {
        wire
    })
}

/// Average HBM bandwidth the GEMM draws in isolation.
pub fn gemm_bandwidth_demand(
    g: &GemmKernel,
    md: &MachineDescriptor,
    p: &EfficiencyParams,
) -> Result<f64> {
    let t = roofline_gemm_time(g, md, p);
    if t <= 0.0 {
        return Err(Error::NonPositive {
            what: "GEMM time",
            value: t,
        });
    }
    Ok(g.min_bytes() / t)
}

/// Average per-GPU memory bandwidth the collective draws over its wire time.
pub fn collective_bandwidth_demand(
    c: &CollectiveOp,
    md: &MachineDescriptor,
    p: &EfficiencyParams,
) -> Result<f64> {
    let wire = roofline_collective_time(c, md, p, false)?;
    collective_bandwidth_demand_over(c, wire)
}

/// Same traffic as [`collective_bandwidth_demand`] spread over `time`.
pub fn collective_bandwidth_demand_over(c: &CollectiveOp, time: f64) -> Result<f64> {
    if time <= 0.0 {
        return Err(Error::NonPositive {
            what: "collective time",
            value: time,
        });
    }
    let n = f64::from(c.n_ranks);
    let bytes = c.kind.traffic_factor() * (n - 1.0) / n * c.payload_bytes as f64;
    Ok(bytes / time)
}

pub fn bundled_dataset() -> Vec<C3Scenario> {
    load_dataset(BUNDLED_SCENARIOS).expect("bundled dataset is valid")
}

/// Parse a JSON array of scenarios. Blank input is an empty dataset.
pub fn load_dataset(text: &str) -> Result<Vec<C3Scenario>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let scenarios: Vec<C3Scenario> =
        serde_json::from_str(text).map_err(Error::json("scenario dataset"))?;
    let mut seen = HashSet::new();
    for s in &scenarios {
        s.gemm.validate()?;
        s.collective.validate()?;
        if !seen.insert((s.id.clone(), s.collective.kind)) {
            return Err(Error::InvalidWorkload(format!(
                "duplicate scenario `{}`",
                s.key()
            )));
        }
    }
    Ok(scenarios)
}

pub fn save_dataset(scenarios: &[C3Scenario]) -> String {
    serde_json::to_string_pretty(scenarios).expect("dataset serializes")
}

/// Transformer layer shape for [`ingest_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: u64,
    pub ffn: u64,
    pub tokens: u64,
    pub dtype_bytes: u32,
    pub shards: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWorkload {
    pub gemms: Vec<GemmKernel>,
    /// One weight all-gather per GEMM, same order; empty when unsharded.
    pub all_gathers: Vec<CollectiveOp>,
}

/// Forward GEMMs of one layer and the FSDP weight gathers that feed them.
///
/// Convention: `m = tokens`, `n` = output features, `k` = input features.
/// Attention projections are folded into one `hidden x hidden` GEMM; the MLP
/// contributes a fused gate/up GEMM and a down projection. Gathered payloads
/// are padded up to a multiple of `shards`.
pub fn ingest_model(cfg: &ModelConfig) -> LayerWorkload {
    let t = cfg.tokens;
    let shapes = [
        ("attn", t, cfg.hidden, cfg.hidden),
        ("mlp_up", t, 2 * cfg.ffn, cfg.hidden),
        ("mlp_down", t, cfg.hidden, cfg.ffn),
    ];
    let gemms: Vec<GemmKernel> = shapes
        .iter()
        .map(|&(tag, m, n, k)| GemmKernel::new(tag, m, n, k, cfg.dtype_bytes))
        .collect();
    let all_gathers = if cfg.shards > 1 {
        let shards = u64::from(cfg.shards);
        gemms
            .iter()
            .map(|g| {
                let weight = g.n * g.k * u64::from(cfg.dtype_bytes);
                let padded = weight.div_ceil(shards) * shards;
                CollectiveOp::new(CollectiveKind::AllGather, padded, cfg.shards)
            })
            .collect()
    } else {
        Vec::new()
    };
    LayerWorkload { gemms, all_gathers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::machine_op_to_byte;
    use approx::assert_relative_eq;

    fn cb1() -> GemmKernel {
        GemmKernel::new("cb1", 8192, 8192, 8192, 2)
    }

    fn mi300x() -> (MachineDescriptor, EfficiencyParams) {
        (MachineDescriptor::mi300x(), EfficiencyParams::default())
    }

    #[test]
    fn flops() {
        assert_relative_eq!(cb1().flops(), 1.0995e12, max_relative = 1e-4);
        assert_eq!(GemmKernel::new("u", 1, 1, 1, 2).flops(), 2.0);
        let mb2 = GemmKernel::new("mb2", 16384, 106496, 8192, 2);
        assert_relative_eq!(mb2.flops(), 2.8587e13, max_relative = 1e-4);
    }

    #[test]
    fn min_bytes() {
        assert_eq!(cb1().min_bytes(), 402_653_184.0);
        assert_eq!(GemmKernel::new("u", 1, 1, 1, 2).min_bytes(), 6.0);
        let mb1 = GemmKernel::new("mb1", 8192, 57344, 8192, 2);
        assert_relative_eq!(mb1.min_bytes(), 2.0133e9, max_relative = 1e-4);
    }

    #[test]
    fn gemm_classification() {
        let ratio = 246.7;
        assert_eq!(classify_gemm_boundedness(&cb1(), ratio), Boundedness::ComputeBound);
        assert_relative_eq!(cb1().flops() / cb1().min_bytes(), 2730.67, epsilon = 0.01);

        let mut g = GemmKernel::new("edge", 1, 1, 1, 2);
        g.measured_op_to_byte = Some(ratio);
        assert_eq!(classify_gemm_boundedness(&g, ratio), Boundedness::MemoryBound);

        let mut mb1 = GemmKernel::new("mb1", 8192, 57344, 8192, 2);
        mb1.boundedness_override = Some(Boundedness::MemoryBound);
        assert_eq!(classify_gemm_boundedness(&mb1, ratio), Boundedness::MemoryBound);
    }

    #[test]
    fn collective_classification() {
        let (md, _) = mi300x();
        let p = EfficiencyParams {
            efficiency: 0.7,
            comm_launch_overhead_cu: 50e-6,
        };
        let small = CollectiveOp::new(CollectiveKind::AllGather, 1_000_000, 8);
        assert_eq!(
            classify_collective_boundedness(&small, &md, &p).unwrap(),
            CommBoundedness::LatencyBound
        );
        let big = CollectiveOp::new(CollectiveKind::AllGather, 896_000_000, 8);
        assert_eq!(
            classify_collective_boundedness(&big, &md, &p).unwrap(),
            CommBoundedness::BandwidthBound
        );
        let free = EfficiencyParams {
            comm_launch_overhead_cu: 0.0,
            ..p
        };
        let tiny = CollectiveOp::new(CollectiveKind::AllToAll, 8, 8);
        assert_eq!(
            classify_collective_boundedness(&tiny, &md, &free).unwrap(),
            CommBoundedness::BandwidthBound
        );
    }

    #[test]
    fn gemm_roofline() {
        let (md, p) = mi300x();
        let t = roofline_gemm_time(&cb1(), &md, &p);
        assert_relative_eq!(t, 1.2014e-3, max_relative = 1e-3);
        let memory_term = cb1().min_bytes() / (0.7 * md.hbm_bandwidth);
        assert_relative_eq!(memory_term, 1.0852e-4, max_relative = 1e-3);

        let full = EfficiencyParams {
            efficiency: 1.0,
            ..p
        };
        assert_relative_eq!(roofline_gemm_time(&cb1(), &md, &full), t * 0.7, max_relative = 1e-12);

        let mut g = cb1();
        g.measured_time = Some(5e-3);
        assert_eq!(roofline_gemm_time(&g, &md, &p), 5e-3);
    }

    #[test]
    fn collective_roofline() {
        let (md, p) = mi300x();
        let ag = CollectiveOp::new(CollectiveKind::AllGather, 896_000_000, 8);
        let t = roofline_collective_time(&ag, &md, &p, false).unwrap();
        assert_relative_eq!(t, 2.5e-3, max_relative = 1e-12);

        let empty = CollectiveOp::new(CollectiveKind::AllGather, 0, 8);
        assert_eq!(roofline_collective_time(&empty, &md, &p, false).unwrap(), 0.0);
        assert_eq!(
            roofline_collective_time(&empty, &md, &p, true).unwrap(),
            p.comm_launch_overhead_cu
        );

        let a2a = CollectiveOp::new(CollectiveKind::AllToAll, 896_000_000, 8);
        assert_eq!(roofline_collective_time(&a2a, &md, &p, false).unwrap(), t);

        let single = CollectiveOp::new(CollectiveKind::AllGather, 1024, 1);
        assert_eq!(roofline_collective_time(&single, &md, &p, true).unwrap(), 0.0);

        let too_many = CollectiveOp::new(CollectiveKind::AllGather, 1024, 16);
        assert!(matches!(
            roofline_collective_time(&too_many, &md, &p, false),
            Err(Error::TooManyRanks { .. })
        ));
    }

    #[test]
    fn workgroups() {
        assert_eq!(estimate_workgroups(KernelRef::Gemm(&cb1())), 4096);
        let ag = CollectiveOp::new(CollectiveKind::AllGather, 8, 8);
        assert_eq!(estimate_workgroups(KernelRef::Collective(&ag)), 64);
        let a2a = CollectiveOp::new(CollectiveKind::AllToAll, 8, 8);
        assert_eq!(estimate_workgroups(KernelRef::Collective(&a2a)), 56);
        assert_eq!(GemmKernel::new("t", 128, 128, 4096, 2).workgroups(), 1);
        assert_eq!(GemmKernel::new("t", 129, 128, 1, 2).workgroups(), 2);
    }

    #[test]
    fn bandwidth_demands() {
        let (md, p) = mi300x();
        let d = gemm_bandwidth_demand(&cb1(), &md, &p).unwrap();
        assert_relative_eq!(d, 335e9, max_relative = 2e-3);

        let a2a = CollectiveOp::new(CollectiveKind::AllToAll, 896_000_000, 8);
        let d_a2a = collective_bandwidth_demand(&a2a, &md, &p).unwrap();
        assert_relative_eq!(d_a2a, 2.0 * 784e6 / 2.5e-3, max_relative = 1e-12);
        assert_relative_eq!(d_a2a, 627.2e9, max_relative = 1e-12);

        let ag = CollectiveOp::new(CollectiveKind::AllGather, 896_000_000, 8);
        let d_ag = collective_bandwidth_demand(&ag, &md, &p).unwrap();
        assert_relative_eq!(d_ag, 0.86 * d_a2a, max_relative = 1e-12);

        let empty = CollectiveOp::new(CollectiveKind::AllGather, 0, 8);
        assert!(collective_bandwidth_demand(&empty, &md, &p).is_err());
    }

    #[test]
    fn bundled_dataset_shape() {
        let ds = bundled_dataset();
        assert_eq!(ds.len(), 30);
        let ids: HashSet<_> = ds.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 15);
        let mb2 = ds.iter().find(|s| s.id == "mb2_26.5G").unwrap();
        assert_eq!(mb2.expected_taxonomy, Some(C3Type::GcEqual));
        for s in &ds {
            let memory_tagged = s.gemm.tag.starts_with("mb");
            assert_eq!(
                s.gemm.boundedness_override == Some(Boundedness::MemoryBound),
                memory_tagged,
                "{}",
                s.id
            );
        }
        let tags: HashSet<_> = ds.iter().map(|s| s.gemm.tag.as_str()).collect();
        assert_eq!(tags.len(), 7);
        let modeled = ds.iter().filter(|s| s.source != Source::Synthetic).count();
        assert_eq!(modeled, 7);
    }

    #[test]
    fn cb_gemms_are_analytically_compute_bound() {
        let md = MachineDescriptor::mi300x();
        let ratio = machine_op_to_byte(&md).unwrap();
        for s in bundled_dataset().iter().filter(|s| s.gemm.tag.starts_with("cb")) {
            let mut g = s.gemm.clone();
            g.boundedness_override = None;
            assert_eq!(classify_gemm_boundedness(&g, ratio), Boundedness::ComputeBound);
        }
    }

    #[test]
    fn dataset_edge_cases() {
        assert!(load_dataset("").unwrap().is_empty());
        assert!(load_dataset("[]").unwrap().is_empty());
        assert!(load_dataset("{").is_err());

        let ds = bundled_dataset();
        let dup = save_dataset(&[ds[0].clone(), ds[0].clone()]);
        assert!(load_dataset(&dup).is_err());

        let mut bad = ds[0].clone();
        bad.collective.payload_bytes += 1;
        assert!(load_dataset(&save_dataset(&[bad])).is_err());

        assert_eq!(load_dataset(&save_dataset(&ds)).unwrap(), ds);
    }

    #[test]
    fn ingest_llama70b_layer() {
        let cfg = ModelConfig {
            hidden: 8192,
            ffn: 28672,
            tokens: 8192,
            dtype_bytes: 2,
            shards: 8,
        };
        let layer = ingest_model(&cfg);
        let (idx, up) = layer
            .gemms
            .iter()
            .enumerate()
            .find(|(_, g)| g.tag == "mlp_up")
            .unwrap();
        assert_eq!((up.m, up.n, up.k), (8192, 57344, 8192));
        assert_eq!(layer.all_gathers[idx].payload_bytes, 939_524_096);
        assert_eq!(layer.all_gathers[idx].payload_bytes, 896 << 20);
        assert_eq!(layer.all_gathers.len(), layer.gemms.len());
        assert!(layer.all_gathers.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn ingest_degenerate_shapes() {
        let cfg = ModelConfig {
            hidden: 1,
            ffn: 5,
            tokens: 3,
            dtype_bytes: 2,
            shards: 1,
        };
        let layer = ingest_model(&cfg);
        assert!(layer.all_gathers.is_empty());
        let up = layer.gemms.iter().find(|g| g.tag == "mlp_up").unwrap();
        assert_eq!((up.n, up.k), (10, 1));
    }
}
