//! Compute interference through CU-loss slowdown tables, memory interference
//! through proportional bandwidth sharing, and residual co-run penalties.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::MachineDescriptor;
use crate::workload::{Boundedness, CollectiveKind};

const DEFAULT_TABLES_CSV: &str = include_str!("../data/slowdown-tables.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelClass {
    GemmComputeBound,
    GemmMemoryBound,
    AllGather,
    AllToAll,
}

impl KernelClass {
    pub const ALL: [KernelClass; 4] = [
        KernelClass::GemmComputeBound,
        KernelClass::GemmMemoryBound,
        KernelClass::AllGather,
        KernelClass::AllToAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelClass::GemmComputeBound => "gemm-compute-bound",
            KernelClass::GemmMemoryBound => "gemm-memory-bound",
            KernelClass::AllGather => "all-gather",
            KernelClass::AllToAll => "all-to-all",
        }
    }

    pub fn gemm(b: Boundedness) -> Self {
        match b {
            Boundedness::ComputeBound => KernelClass::GemmComputeBound,
            Boundedness::MemoryBound => KernelClass::GemmMemoryBound,
        }
    }

    pub fn collective(kind: CollectiveKind) -> Self {
        match kind {
            CollectiveKind::AllGather => KernelClass::AllGather,
            CollectiveKind::AllToAll => KernelClass::AllToAll,
        }
    }
}

impl fmt::Display for KernelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KernelClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidTable(format!("unknown kernel class `{s}`")))
    }
}

/// Which hardware moves the collective's bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    #[serde(rename = "cu")]
    Cu,
    #[serde(rename = "dma")]
    Dma,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Cu => "CU",
            Backend::Dma => "DMA",
        })
    }
}

/// Slowdown versus isolated full-GPU time, keyed by CUs available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowdownTable {
    pub kernel_class: KernelClass,
    pub points: Vec<(u32, f64)>,
}

impl SlowdownTable {
    pub fn new(kernel_class: KernelClass, points: Vec<(u32, f64)>) -> Self {
        Self {
            kernel_class,
            points,
        }
    }

    /// Checks that do not depend on the machine.
    pub fn validate_shape(&self) -> Result<()> {
        let class = self.kernel_class;
        if self.points.is_empty() {
            return Err(Error::InvalidTable(format!("table `{class}` is empty")));
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidTable(format!(
                    "table `{class}`: cus must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(cus, s) in &self.points {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidTable(format!(
                    "table `{class}`: slowdown at {cus} CUs must be positive, got {s}"
                )));
            }
        }
        let (_, last) = self.points[self.points.len() - 1];
        if last != 1.0 {
            return Err(Error::InvalidTable(format!(
                "table `{class}`: slowdown at the largest CU count must be 1.0, got {last}"
            )));
        }
        Ok(())
    }

    pub fn validate(&self, md: &MachineDescriptor) -> Result<()> {
        self.validate_shape()?;
        for &(cus, _) in &self.points {
            if cus == 0 || cus % md.min_cu_grain != 0 || cus > md.cus_per_gpu {
                return Err(Error::InvalidTable(format!(
                    "table `{}`: {cus} CUs is not a positive multiple of {} within {}",
                    self.kernel_class, md.min_cu_grain, md.cus_per_gpu
                )));
            }
        }
        Ok(())
    }

    pub fn slowdown_at(&self, cus: f64) -> Result<f64> {
        slowdown_at(self, cus)
    }
}

/// Piecewise-linear lookup, clamped to the end knots.
pub fn slowdown_at(t: &SlowdownTable, cus: f64) -> Result<f64> {
    let pts = &t.points;
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => {
            return Err(Error::InvalidTable(format!(
                "table `{}` is empty",
                t.kernel_class
            )))
        }
    };
    if cus <= f64::from(first.0) {
        return Ok(first.1);
    }
    if cus >= f64::from(last.0) {
        return Ok(last.1);
    }
    let hi = pts.partition_point(|&(c, _)| f64::from(c) < cus);
    let (c1, s1) = pts[hi];
    if f64::from(c1) == cus {
        return Ok(s1);
    }
    let (c0, s0) = pts[hi - 1];
    let w = (cus - f64::from(c0)) / f64::from(c1 - c0);
    Ok(s0 + (s1 - s0) * w)
}

/// CUs beyond which a CU-driven collective stops speeding up.
pub fn comm_saturation_cus(kind: CollectiveKind) -> u32 {
    match kind {
        CollectiveKind::AllGather => 32,
        CollectiveKind::AllToAll => 64,
    }
}

/// Bandwidth proportional to CUs up to saturation, flat after.
pub fn default_comm_table(kind: CollectiveKind, md: &MachineDescriptor) -> SlowdownTable {
    let sat = comm_saturation_cus(kind);
    let grain = md.min_cu_grain;
    let mut points: Vec<(u32, f64)> = (1..)
        .map(|i| i * grain)
        .take_while(|&c| c < sat && c < md.cus_per_gpu)
        .map(|c| (c, f64::from(sat) / f64::from(c)))
        .collect();
    // The full-GPU knot must be 1.0 even when saturation lies beyond it.
    let top = md.round_up_to_grain(sat).min(md.cus_per_gpu);
    points.push((top, 1.0));
    if top < md.cus_per_gpu {
        points.push((md.cus_per_gpu, 1.0));
    }
    SlowdownTable::new(KernelClass::collective(kind), points)
}

/// One table per kernel class.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowdownTables {
    tables: BTreeMap<KernelClass, SlowdownTable>,
}

impl SlowdownTables {
    pub fn new(tables: impl IntoIterator<Item = SlowdownTable>) -> Self {
        Self {
            tables: tables.into_iter().map(|t| (t.kernel_class, t)).collect(),
        }
    }

    /// Shipped calibration for the MI300X node.
    pub fn mi300x() -> Self {
        load_slowdown_tables(DEFAULT_TABLES_CSV).expect("bundled slowdown tables are valid")
    }

    /// Every class flat at 1.0 for `md`.
    pub fn unity(md: &MachineDescriptor) -> Self {
        Self::new(
            KernelClass::ALL
                .into_iter()
                .map(|c| SlowdownTable::new(c, vec![(md.cus_per_gpu, 1.0)])),
        )
    }

    pub fn get(&self, class: KernelClass) -> Result<&SlowdownTable> {
        self.tables.get(&class).ok_or(Error::MissingTable(class))
    }

    pub fn insert(&mut self, table: SlowdownTable) {
        self.tables.insert(table.kernel_class, table);
    }

    pub fn iter(&self) -> impl Iterator<Item = &SlowdownTable> {
        self.tables.values()
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn validate(&self, md: &MachineDescriptor) -> Result<()> {
        self.tables.values().try_for_each(|t| t.validate(md))
    }

    pub fn slowdown(&self, class: KernelClass, cus: f64) -> Result<f64> {
        slowdown_at(self.get(class)?, cus)
    }

    pub fn to_csv(&self) -> String {
        save_slowdown_tables(self)
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    kernel_class: String,
    cus: u32,
    slowdown: f64,
}

/// Parse the `kernel_class,cus,slowdown` CSV. Rows for one class must be
/// contiguous and ordered by `cus`.
pub fn load_slowdown_tables(text: &str) -> Result<SlowdownTables> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(Error::csv("slowdown tables"))?;
    if headers.iter().collect::<Vec<_>>() != ["kernel_class", "cus", "slowdown"] {
        return Err(Error::InvalidTable(format!(
            "expected header `kernel_class,cus,slowdown`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut tables: BTreeMap<KernelClass, SlowdownTable> = BTreeMap::new();
    let mut current: Option<KernelClass> = None;
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(Error::csv("slowdown tables"))?;
        let class: KernelClass = row.kernel_class.parse()?;
        if current != Some(class) && tables.contains_key(&class) {
            return Err(Error::InvalidTable(format!(
                "rows for `{class}` are not contiguous"
            )));
        }
        current = Some(class);
        tables
            .entry(class)
            .or_insert_with(|| SlowdownTable::new(class, Vec::new()))
            .points
            .push((row.cus, row.slowdown));
    }
    for t in tables.values() {
        t.validate_shape()?;
    }
    Ok(SlowdownTables { tables })
}

pub fn save_slowdown_tables(tables: &SlowdownTables) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["kernel_class", "cus", "slowdown"])
        .expect("in-memory CSV write");
    for t in tables.iter() {
        for &(cus, slowdown) in &t.points {
            wtr.write_record([t.kernel_class.as_str(), &cus.to_string(), &slowdown.to_string()])
                .expect("in-memory CSV write");
        }
    }
    String::from_utf8(wtr.into_inner().expect("flush")).expect("CSV is UTF-8")
}

/// Per-kernel stretch when co-runners together ask for more bandwidth than
/// `effective_peak`. Proportional sharing stretches every kernel equally.
pub fn shared_memory_factor(demands: &[f64], effective_peak: f64) -> Result<Vec<f64>> {
    if !(effective_peak > 0.0) {
        return Err(Error::NonPositive {
            what: "effective memory bandwidth",
            value: effective_peak,
        });
    }
    if demands.len() <= 1 {
        return Ok(vec![1.0; demands.len()]);
    }
    let total: f64 = demands.iter().sum();
    let f = if total <= effective_peak {
        1.0
    } else {
        total / effective_peak
    };
    Ok(vec![f; demands.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyPair {
    pub cu: f64,
    pub dma: f64,
}

/// Residual co-run interference (cache and scheduler effects) not captured
/// by CU loss or bandwidth sharing, per kernel class and collective backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoRunPenalty {
    pub factors: BTreeMap<KernelClass, PenaltyPair>,
}

impl Default for CoRunPenalty {
    fn default() -> Self {
        let pair = |cu, dma| PenaltyPair { cu, dma };
        Self {
            factors: BTreeMap::from([
                (KernelClass::GemmComputeBound, pair(1.40, 1.15)),
                (KernelClass::GemmMemoryBound, pair(1.40, 1.25)),
                (KernelClass::AllGather, pair(1.35, 1.20)),
                (KernelClass::AllToAll, pair(1.35, 1.30)),
            ]),
        }
    }
}

impl CoRunPenalty {
    pub fn unity() -> Self {
        Self {
            factors: KernelClass::ALL
                .into_iter()
                .map(|c| (c, PenaltyPair { cu: 1.0, dma: 1.0 }))
                .collect(),
        }
    }

    pub fn get(&self, class: KernelClass, backend: Backend) -> Result<f64> {
        let pair = self.factors.get(&class).ok_or_else(|| {
            Error::InvalidParams(format!("no co-run penalty for `{class}`"))
        })?;
        Ok(match backend {
            Backend::Cu => pair.cu,
            Backend::Dma => pair.dma,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for class in KernelClass::ALL {
            let Some(p) = self.factors.get(&class) else {
                return Err(Error::InvalidParams(format!(
                    "no co-run penalty for `{class}`"
                )));
            };
            if !(p.cu.is_finite() && p.dma.is_finite() && p.cu >= 1.0 && p.dma >= 1.0) {
                return Err(Error::InvalidParams(format!(
                    "co-run penalties for `{class}` must be >= 1"
                )));
            }
            if p.dma > p.cu {
                return Err(Error::InvalidParams(format!(
                    "`{class}`: DMA penalty {} exceeds CU penalty {}",
                    p.dma, p.cu
                )));
            }
        }
        Ok(())
    }
}
