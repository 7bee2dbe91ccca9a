//! Least-squares fit of the co-run penalties to measured speedups.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interference::{CoRunPenalty, KernelClass, PenaltyPair, SlowdownTables};
use crate::machine::MachineDescriptor;
use crate::sim::{allocate_cus, ModelParams, Phase2Policy, Prepared, StrategyName};
use crate::workload::{C3Scenario, CollectiveKind};

pub const MIN_POINTS: usize = 3;
pub const MIN_STRATEGIES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Either a bare id or `id/collective`.
    pub scenario_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collective: Option<CollectiveKind>,
    pub strategy: StrategyName,
    pub measured_speedup: f64,
}

/// Parse `scenario_id,strategy,measured_speedup` with an optional
/// `collective` column.
pub fn load_measurements(text: &str) -> Result<Vec<Measurement>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.deserialize::<Measurement>() {
        let m = rec.map_err(Error::csv("measurements"))?;
        if !(m.measured_speedup.is_finite() && m.measured_speedup > 0.0) {
            return Err(Error::Calibration(format!(
                "measured speedup for `{}` must be positive",
                m.scenario_id
            )));
        }
        out.push(m);
    }
    Ok(out)
}

fn resolve<'a>(m: &Measurement, scenarios: &'a [C3Scenario]) -> Result<&'a C3Scenario> {
    let (id, kind) = match (m.scenario_id.split_once('/'), m.collective) {
        (Some((id, k)), _) => (id, Some(k.parse::<CollectiveKind>()?)),
        (None, k) => (m.scenario_id.as_str(), k),
    };
    let hits: Vec<_> = scenarios
        .iter()
        .filter(|s| s.id == id && kind.is_none_or(|k| s.collective.kind == k))
        .collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::Calibration(format!("unknown scenario `{}`", m.scenario_id))),
        _ => Err(Error::Calibration(format!(
            "scenario `{}` is ambiguous; add a collective column",
            m.scenario_id
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub scenario_id: String,
    pub collective: CollectiveKind,
    pub strategy: StrategyName,
    pub measured: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: ModelParams,
    pub residuals: Vec<Residual>,
    pub rms_error: f64,
    pub iterations: u64,
}

/// Each class gets `dma = 1 + a^2` and `cu = dma + b^2`, which keeps every
/// candidate inside the valid region (factors >= 1, DMA <= CU).
fn decode(x: &[f64]) -> CoRunPenalty {
    CoRunPenalty {
        factors: KernelClass::ALL
            .iter()
            .zip(x.chunks(2))
            .map(|(&c, ab)| {
                let dma = 1.0 + ab[0] * ab[0];
                (c, PenaltyPair { cu: dma + ab[1] * ab[1], dma })
            })
            .collect(),
    }
}

fn encode(p: &CoRunPenalty) -> Vec<f64> {
    KernelClass::ALL
        .iter()
        .flat_map(|c| {
            let pair = p.factors.get(c).copied().unwrap_or(PenaltyPair { cu: 1.0, dma: 1.0 });
            [(pair.dma - 1.0).max(0.0).sqrt(), (pair.cu - pair.dma).max(0.0).sqrt()]
        })
        .collect()
}

struct Problem<'a> {
    points: Vec<(&'a C3Scenario, StrategyName, f64)>,
    prepared: Vec<Prepared>,
    phase2: Phase2Policy,
}

impl Problem<'_> {
    fn predictions(&self, penalties: CoRunPenalty) -> Result<Vec<f64>> {
        self.prepared
            .iter()
            .map(|p| Ok(p.run(&penalties, self.phase2)?.speedup))
            .collect()
    }
}

impl CostFunction for Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let pred = self
            .predictions(decode(x))
            .map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        Ok(pred
            .iter()
            .zip(&self.points)
            .map(|(p, &(_, _, m))| (p - m).powi(2))
            .sum())
    }
}

fn simplex(x0: &[f64], step: f64) -> Vec<Vec<f64>> {
    let mut pts = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] += step;
        pts.push(v);
    }
    pts
}

/// Fit the eight co-run penalties by Nelder-Mead, restarting from the best
/// point with a shrinking simplex.
pub fn calibrate(
    measurements: &[Measurement],
    scenarios: &[C3Scenario],
    md: &MachineDescriptor,
    tables: &SlowdownTables,
    base: &ModelParams,
) -> Result<CalibrationResult> {
    if measurements.len() < MIN_POINTS {
        return Err(Error::Calibration(format!(
            "need at least {MIN_POINTS} measurements, got {}",
            measurements.len()
        )));
    }
    let mut strategies: Vec<_> = measurements.iter().map(|m| m.strategy).collect();
    strategies.sort();
    strategies.dedup();
    if strategies.len() < MIN_STRATEGIES {
        return Err(Error::Calibration(format!(
            "need measurements from at least {MIN_STRATEGIES} strategies"
        )));
    }
    let points = measurements
        .iter()
        .map(|m| Ok((resolve(m, scenarios)?, m.strategy, m.measured_speedup)))
        .collect::<Result<Vec<_>>>()?;
    let prepared = points
        .iter()
        .map(|&(s, st, _)| {
            let alloc = allocate_cus(s, st, md, tables, &base.roofline)?;
            Prepared::new(s, st, &alloc, md, tables, base)
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = Problem {
        points,
        prepared,
        phase2: base.phase2,
    };

    let mut x = encode(&base.penalties);
    // Start off the boundary so every coordinate can move both ways.
    for v in &mut x {
        if *v < 0.1 {
            *v = 0.3;
        }
    }
    let mut iterations = 0;
    for step in [0.3, 0.1, 0.03, 0.01] {
        let solver = NelderMead::new(simplex(&x, step))
            .with_sd_tolerance(1e-14)
            .map_err(|e| Error::Calibration(e.to_string()))?;
        let res = Executor::new(&problem, solver)
            .configure(|s| s.max_iters(3000))
            .run()
            .map_err(|e| Error::Calibration(e.to_string()))?;
        iterations += res.state().get_iter();
        x = res
            .state()
            .get_best_param()
            .cloned()
            .ok_or_else(|| Error::Calibration("optimizer returned no point".into()))?;
    }

    let penalties = decode(&x);
    let predicted = problem.predictions(penalties.clone())?;
    let residuals: Vec<Residual> = problem
        .points
        .iter()
        .zip(&predicted)
        .map(|(&(s, st, m), &p)| Residual {
            scenario_id: s.id.clone(),
            collective: s.collective.kind,
            strategy: st,
            measured: m,
            predicted: p,
        })
        .collect();
    let sse: f64 = residuals.iter().map(|r| (r.predicted - r.measured).powi(2)).sum();
    let rms_error = (sse / residuals.len() as f64).sqrt();
    if !rms_error.is_finite() {
        return Err(Error::Calibration("fit diverged".into()));
    }
    Ok(CalibrationResult {
        params: ModelParams {
            penalties,
            ..base.clone()
        },
        residuals,
        rms_error,
        iterations,
    })
}

impl CostFunction for &Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        (*self).cost(x)
    }
}
