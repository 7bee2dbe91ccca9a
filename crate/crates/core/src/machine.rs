//! Hardware description of a single GPU node.
//!
//! A [`MachineDescriptor`] is loaded from a JSON document and validated once;
//! everything downstream treats it as immutable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MI300X_NODE: &str = include_str!("../data/mi300x-node.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    #[serde(rename = "fully-connected")]
    FullyConnected,
}

/// One GPU node. Bandwidths are bytes/second, overheads are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineDescriptor {
    pub gpus_per_node: u32,
    pub cus_per_gpu: u32,
    pub xcds_per_gpu: u32,
    pub cus_per_xcd: u32,
    /// Smallest block of CUs that can be reserved for a stream.
    pub min_cu_grain: u32,
    pub dma_engines_per_gpu: u32,
    pub peak_compute_flops: f64,
    pub hbm_bandwidth: f64,
    pub llc_capacity: u64,
    pub link_bandwidth_unidir: f64,
    pub links_per_gpu: u32,
    pub topology: Topology,
    /// CPU cost of submitting one DMA transfer.
    pub cpu_launch_overhead: f64,
    /// CPU cost of waiting for DMA completion.
    pub dma_sync_overhead: f64,
}

impl MachineDescriptor {
    /// The bundled 8x MI300X node.
    pub fn mi300x() -> Self {
        Self::from_json(MI300X_NODE).expect("bundled machine descriptor is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let md: Self = serde_json::from_str(text).map_err(Error::json("machine descriptor"))?;
        md.validate()?;
        Ok(md)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("machine descriptor serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidMachine(msg));

        if self.gpus_per_node == 0 {
            return fail("gpus_per_node must be at least 1".into());
        }
        if self.cus_per_gpu == 0 {
            return fail("cus_per_gpu must be at least 1".into());
        }
        let product = u64::from(self.xcds_per_gpu) * u64::from(self.cus_per_xcd);
        if product != u64::from(self.cus_per_gpu) {
            return fail(format!(
                "cus_per_gpu ({}) != xcds_per_gpu ({}) x cus_per_xcd ({})",
                self.cus_per_gpu, self.xcds_per_gpu, self.cus_per_xcd
            ));
        }
        if self.min_cu_grain == 0 {
            return fail("min_cu_grain must be at least 1".into());
        }
        if !self.cus_per_gpu.is_multiple_of(self.min_cu_grain) {
            return fail(format!(
                "min_cu_grain ({}) does not divide cus_per_gpu ({})",
                self.min_cu_grain, self.cus_per_gpu
            ));
        }
        if self.dma_engines_per_gpu == 0 {
            return fail("dma_engines_per_gpu must be at least 1".into());
        }
        match self.topology {
            Topology::FullyConnected => {
                if self.links_per_gpu != self.gpus_per_node - 1 {
                    return fail(format!(
                        "fully-connected topology needs links_per_gpu == gpus_per_node - 1 ({}), got {}",
                        self.gpus_per_node - 1,
                        self.links_per_gpu
                    ));
                }
            }
        }
        for (name, value) in [
            ("peak_compute_flops", self.peak_compute_flops),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("link_bandwidth_unidir", self.link_bandwidth_unidir),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return fail(format!("{name} must be a positive finite number, got {value}"));
            }
        }
        for (name, value) in [
            ("cpu_launch_overhead", self.cpu_launch_overhead),
            ("dma_sync_overhead", self.dma_sync_overhead),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {value}"));
            }
        }
        Ok(())
    }

    /// Effective CU count after rounding `cus` up to the allocation grain.
    pub fn round_up_to_grain(&self, cus: u32) -> u32 {
        cus.div_ceil(self.min_cu_grain) * self.min_cu_grain
    }
}

/// Machine balance point: peak ops per byte of HBM traffic.
pub fn machine_op_to_byte(md: &MachineDescriptor) -> Result<f64> {
    if md.hbm_bandwidth <= 0.0 {
        return Err(Error::ZeroBandwidth);
    }
    Ok(md.peak_compute_flops / md.hbm_bandwidth)
}
