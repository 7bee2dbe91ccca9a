//! C3 taxonomy, ideal overlap speedup and fraction-of-ideal.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 1.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum C3Type {
    #[serde(rename = "G-long")]
    GLong,
    #[serde(rename = "C-long")]
    CLong,
    #[serde(rename = "GC-equal")]
    GcEqual,
}

impl C3Type {
    pub const ALL: [C3Type; 3] = [C3Type::GLong, C3Type::CLong, C3Type::GcEqual];

    pub fn as_str(self) -> &'static str {
        match self {
            C3Type::GLong => "G-long",
            C3Type::CLong => "C-long",
            C3Type::GcEqual => "GC-equal",
        }
    }
}

impl fmt::Display for C3Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for C3Type {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        C3Type::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidWorkload(format!("unknown taxonomy label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyLabel {
    pub value: C3Type,
    pub threshold: f64,
}

fn check_times(t_gemm: f64, t_comm: f64) -> Result<()> {
    if !(t_gemm > 0.0 && t_gemm.is_finite()) {
        return Err(Error::NonPositive {
            what: "GEMM time",
            value: t_gemm,
        });
    }
    if !(t_comm > 0.0 && t_comm.is_finite()) {
        return Err(Error::NonPositive {
            what: "communication time",
            value: t_comm,
        });
    }
    Ok(())
}

/// Label a GEMM/collective pair by which side dominates. A kernel is "long"
/// only when it exceeds the other by strictly more than `threshold`.
pub fn classify_c3(t_gemm: f64, t_comm: f64, threshold: f64) -> Result<TaxonomyLabel> {
    check_times(t_gemm, t_comm)?;
    if !(threshold > 1.0) {
        return Err(Error::InvalidParams(format!(
            "taxonomy threshold must exceed 1, got {threshold}"
        )));
    }
    let value = if t_gemm > threshold * t_comm {
        C3Type::GLong
    } else if t_comm > threshold * t_gemm {
        C3Type::CLong
    } else {
        C3Type::GcEqual
    };
    Ok(TaxonomyLabel { value, threshold })
}

/// Speedup when the shorter kernel hides entirely behind the longer one.
pub fn ideal_speedup(t_gemm: f64, t_comm: f64) -> Result<f64> {
    check_times(t_gemm, t_comm)?;
    Ok((t_gemm + t_comm) / t_gemm.max(t_comm))
}

/// Share of the available overlap gain actually realized. Slowdowns
/// (achieved below 1) count as zero.
pub fn fraction_of_ideal(achieved: f64, ideal: f64) -> Result<f64> {
    if !(ideal > 1.0) {
        return Err(Error::IdealNotAboveOne(ideal));
    }
    Ok((achieved.max(1.0) - 1.0) / (ideal - 1.0))
}
