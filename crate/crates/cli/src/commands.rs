use std::io::Write;

use serde::Serialize;

use c3_core::calibrate::calibrate as fit;
use c3_core::strategy::{self, comm_isolated_time, Candidate};
use c3_core::taxonomy::DEFAULT_THRESHOLD;
use c3_core::workload::{classify_collective_boundedness, classify_gemm_boundedness};
use c3_core::{
    allocate_cus, classify_c3, conccl_rp_plan, ideal_speedup, machine_op_to_byte,
    partition_heuristic, plan_collective, plan_cost, roofline_gemm_time, simulate, sweep as run_sweep,
    validate_plan, C3Scenario, C3Type, CollectiveKind, CollectiveOp, PartitionPlan, PlanCost,
    StrategyName, TransferPlan,
};

use crate::io::{load, load_measured, read, summary_path, write_atomic, Loaded};
use crate::{
    CalibrateArgs, ClassifyArgs, ConcclPlanArgs, Failure, Format, Inputs, Output, PlanArgs,
    Selection, SweepArgs,
};

fn stdout_err(e: std::io::Error) -> Failure {
    Failure::io(anyhow::anyhow!("cannot write to stdout: {e}"))
}

/// Send `text` to `--out` if given, else to stdout.
fn emit(output: &Output, text: &str, stdout: &mut dyn Write) -> Result<(), Failure> {
    match &output.out {
        Some(p) => write_atomic(p, text),
        None => stdout.write_all(text.as_bytes()).map_err(stdout_err),
    }
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn csv_of<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("CSV is UTF-8")
}

fn parse_collective(s: &str) -> Result<CollectiveKind, Failure> {
    s.parse()
        .map_err(|_| Failure::unknown(format!("unknown collective `{s}`")))
}

pub fn parse_strategies(names: &[String]) -> Result<Vec<StrategyName>, Failure> {
    if names.iter().any(|n| n == "all") {
        return Ok(StrategyName::ALL.to_vec());
    }
    let mut out = Vec::new();
    for n in names {
        let s: StrategyName = n
            .parse()
            .map_err(|_| Failure::unknown(format!("unknown strategy `{n}`")))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn roofline_label(s: &C3Scenario, l: &Loaded) -> Result<(f64, f64, C3Type), Failure> {
    let p = &l.params.roofline;
    let t_g = roofline_gemm_time(&s.gemm, &l.machine, p);
    let t_c = comm_isolated_time(s, &l.machine, p)?;
    Ok((t_g, t_c, classify_c3(t_g, t_c, DEFAULT_THRESHOLD)?.value))
}

/// Apply `--scenario` and the filters. An explicit id that matches nothing is
/// an unknown entity.
fn select(l: &Loaded, sel: &Selection) -> Result<Vec<C3Scenario>, Failure> {
    let kind = sel.filter_collective.as_deref().map(parse_collective).transpose()?;
    let label = match sel.filter_taxonomy.as_deref() {
        Some(t) => Some(
            t.parse::<C3Type>()
                .map_err(|_| Failure::unknown(format!("unknown taxonomy label `{t}`")))?,
        ),
        None => None,
    };
    let wanted = sel.scenario.as_deref().map(split_id).transpose()?;
    if let Some((id, k)) = &wanted {
        if !l.dataset.iter().any(|s| s.id == *id && k.is_none_or(|k| s.collective.kind == k)) {
            return Err(Failure::unknown(format!(
                "no scenario `{}` in the dataset",
                sel.scenario.as_deref().unwrap_or_default()
            )));
        }
    }
    let mut out = Vec::new();
    for s in &l.dataset {
        if let Some((id, k)) = &wanted {
            if s.id != *id || k.is_some_and(|k| s.collective.kind != k) {
                continue;
            }
        }
        if kind.is_some_and(|k| s.collective.kind != k) {
            continue;
        }
        if let Some(label) = label {
            if roofline_label(s, l)?.2 != label {
                continue;
            }
        }
        out.push(s.clone());
    }
    Ok(out)
}

fn split_id(s: &str) -> Result<(String, Option<CollectiveKind>), Failure> {
    match s.split_once('/') {
        Some((id, k)) => Ok((id.to_string(), Some(parse_collective(k)?))),
        None => Ok((s.to_string(), None)),
    }
}

#[derive(Debug, Serialize)]
struct ClassifyRow {
    scenario_id: String,
    collective: CollectiveKind,
    gemm_boundedness: String,
    collective_boundedness: String,
    t_gemm_s: f64,
    t_comm_s: f64,
    taxonomy: C3Type,
    ideal: f64,
    expected: Option<C3Type>,
    matches_expected: Option<bool>,
}

pub fn classify(a: &ClassifyArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let l = load(&a.inputs)?;
    let ratio = machine_op_to_byte(&l.machine)?;
    let mut rows = Vec::new();
    for s in select(&l, &a.selection)? {
        let (t_g, t_c, label) = roofline_label(&s, &l)?;
        rows.push(ClassifyRow {
            scenario_id: s.id.clone(),
            collective: s.collective.kind,
            gemm_boundedness: classify_gemm_boundedness(&s.gemm, ratio).to_string(),
            collective_boundedness: classify_collective_boundedness(
                &s.collective,
                &l.machine,
                &l.params.roofline,
            )?
            .to_string(),
            t_gemm_s: t_g,
            t_comm_s: t_c,
            taxonomy: label,
            ideal: ideal_speedup(t_g, t_c)?,
            expected: s.expected_taxonomy,
            matches_expected: s.expected_taxonomy.map(|e| e == label),
        });
    }
    let text = match a.output.format {
        Format::Csv => csv_of(&rows),
        Format::Json => json(&rows),
    };
    emit(&a.output, &text, stdout)?;
    let mismatched: Vec<_> = rows
        .iter()
        .filter(|r| r.matches_expected == Some(false))
        .map(|r| format!("{}/{}", r.scenario_id, r.collective))
        .collect();
    if !mismatched.is_empty() {
        writeln!(stderr, "label differs from expected: {}", mismatched.join(", "))
            .map_err(stdout_err)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PlanReport {
    scenario_id: String,
    collective: CollectiveKind,
    strategy: StrategyName,
    plan: PartitionPlan,
    simulated_makespan_s: f64,
    speedup: f64,
    ideal: f64,
    fraction_of_ideal: f64,
}

#[derive(Debug, Serialize)]
struct PlanSummaryRow<'a> {
    scenario_id: &'a str,
    collective: CollectiveKind,
    strategy: StrategyName,
    backend: String,
    cus_gemm: u32,
    cus_comm: u32,
    cus_idle: u32,
    launch_order: String,
    predicted_makespan_s: f64,
    simulated_makespan_s: f64,
    fraction_of_ideal: f64,
}

#[derive(Debug, Serialize)]
struct CandidateRow<'a> {
    scenario_id: &'a str,
    collective: CollectiveKind,
    cus_comm: u32,
    cus_gemm: u32,
    gemm_time_s: f64,
    comm_time_s: f64,
    predicted_s: f64,
    chosen: bool,
}

fn plan_for(s: &C3Scenario, strategy: StrategyName, l: &Loaded) -> Result<PlanReport, Failure> {
    let (md, t, p) = (&l.machine, &l.tables, &l.params.roofline);
    let alloc = allocate_cus(s, strategy, md, t, p)?;
    let tl = simulate(s, strategy, md, t, &l.params)?;
    let (predicted, candidates) = match strategy {
        StrategyName::C3Rp | StrategyName::C3SpRp => {
            let h = partition_heuristic(s, md, t, p)?;
            (h.predicted_makespan, h.candidates)
        }
        StrategyName::Conccl => (strategy::conccl_plan(s, md, t, p)?.predicted_makespan, Vec::new()),
        StrategyName::ConcclRp => (conccl_rp_plan(s, md, t, p)?.predicted_makespan, Vec::new()),
        _ => (tl.makespan, Vec::new()),
    };
    Ok(PlanReport {
        scenario_id: s.id.clone(),
        collective: s.collective.kind,
        strategy,
        plan: PartitionPlan {
            comm_backend: alloc.backend,
            cus_comm: alloc.cus_comm,
            cus_gemm: alloc.cus_gemm,
            cus_idle: alloc.cus_idle,
            schedule_order: alloc.order,
            predicted_makespan: predicted,
            candidates,
        },
        simulated_makespan_s: tl.makespan,
        speedup: tl.speedup,
        ideal: tl.ideal,
        fraction_of_ideal: tl.fraction_of_ideal,
    })
}

pub fn plan(a: &PlanArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let l = load(&a.inputs)?;
    let strategy = parse_strategies(std::slice::from_ref(&a.strategy))?;
    let [strategy] = strategy.as_slice() else {
        return Err(Failure::invalid("plan takes exactly one strategy"));
    };
    let sel = Selection {
        scenario: Some(a.scenario.clone()),
        filter_collective: a.filter_collective.clone(),
        filter_taxonomy: None,
    };
    let reports = select(&l, &sel)?
        .iter()
        .map(|s| plan_for(s, *strategy, &l))
        .collect::<Result<Vec<_>, _>>()?;
    let text = match a.output.format {
        Format::Json => json(&reports),
        Format::Csv => {
            let summary: Vec<_> = reports
                .iter()
                .map(|r| PlanSummaryRow {
                    scenario_id: &r.scenario_id,
                    collective: r.collective,
                    strategy: r.strategy,
                    backend: r.plan.comm_backend.to_string(),
                    cus_gemm: r.plan.cus_gemm,
                    cus_comm: r.plan.cus_comm,
                    cus_idle: r.plan.cus_idle,
                    launch_order: r
                        .plan
                        .schedule_order
                        .iter()
                        .map(|k| k.to_string())
                        .collect::<Vec<_>>()
                        .join(">"),
                    predicted_makespan_s: r.plan.predicted_makespan,
                    simulated_makespan_s: r.simulated_makespan_s,
                    fraction_of_ideal: r.fraction_of_ideal,
                })
                .collect();
            let candidates: Vec<_> = reports
                .iter()
                .flat_map(|r| {
                    r.plan.candidates.iter().map(move |c: &Candidate| CandidateRow {
                        scenario_id: &r.scenario_id,
                        collective: r.collective,
                        cus_comm: c.cus_comm,
                        cus_gemm: c.cus_gemm,
                        gemm_time_s: c.gemm_time,
                        comm_time_s: c.comm_time,
                        predicted_s: c.predicted,
                        chosen: c.cus_comm == r.plan.cus_comm,
                    })
                })
                .collect();
            let mut text = csv_of(&summary);
            if !candidates.is_empty() {
                text.push('\n');
                text.push_str(&csv_of(&candidates));
            }
            text
        }
    };
    emit(&a.output, &text, stdout)
}

/// Accepts a byte count or a number with a B/KB/MB/GB/KiB/MiB/GiB suffix.
pub fn parse_bytes(s: &str) -> Result<u64, Failure> {
    let t = s.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let scale: f64 = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "kb" => 1e3,
        "mb" => 1e6,
        "gb" => 1e9,
        "kib" => 1024.0,
        "mib" => 1024.0 * 1024.0,
        "gib" => 1024.0 * 1024.0 * 1024.0,
        _ => return Err(Failure::invalid(format!("unrecognised size unit in `{s}`"))),
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Failure::invalid(format!("cannot parse size `{s}`")))?;
    let bytes = value * scale;
    if !(bytes.is_finite() && bytes >= 0.0) || bytes.fract() != 0.0 || bytes > u64::MAX as f64 {
        return Err(Failure::invalid(format!("`{s}` is not a whole number of bytes")));
    }
    Ok(bytes as u64)
}

#[derive(Debug, Serialize)]
struct ConcclReport<'a> {
    kind: CollectiveKind,
    n_ranks: u32,
    transfers: usize,
    valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    cost: &'a PlanCost,
}

pub fn conccl_plan(a: &ConcclPlanArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let l = load(&Inputs {
        machine: a.machine.clone(),
        params: a.params.clone(),
        zero_interference: a.zero_interference,
        ..Inputs::default()
    })?;
    let plan: TransferPlan = match &a.validate {
        Some(p) => serde_json::from_str(&read(p)?)
            .map_err(|e| Failure::invalid(format!("cannot parse plan {}: {e}", p.display())))?,
        None => {
            let kind = parse_collective(a.kind.as_deref().unwrap_or_default())?;
            let payload = parse_bytes(a.payload.as_deref().unwrap_or_default())?;
            let op = CollectiveOp::new(kind, payload, a.ranks.unwrap_or_default());
            plan_collective(&op, &l.machine)?
        }
    };
    let verdict = validate_plan(&plan);
    let cost = plan_cost(&plan, &l.machine, &l.params.roofline);
    let report = ConcclReport {
        kind: plan.kind,
        n_ranks: plan.n_ranks,
        transfers: plan.transfers.len(),
        valid: verdict.is_ok(),
        error: verdict.as_ref().err().map(|e| e.to_string()),
        cost: &cost,
    };

    if verdict.is_ok() && a.validate.is_none() {
        if let Some(path) = &a.output.out {
            let text = match a.output.format {
                Format::Json => json(&plan),
                Format::Csv => csv_of(&plan.transfers),
            };
            write_atomic(path, &text)?;
        }
    }
    let text = match a.output.format {
        Format::Json => json(&report),
        Format::Csv => {
            let mut lines = vec![
                "metric,value".to_string(),
                format!("kind,{}", report.kind),
                format!("n_ranks,{}", report.n_ranks),
                format!("transfers,{}", report.transfers),
                format!("valid,{}", report.valid),
                format!("total_s,{}", cost.total),
                format!("wire_s,{}", cost.wire),
            ];
            lines.extend(
                cost.per_engine
                    .iter()
                    .enumerate()
                    .map(|(e, t)| format!("engine_{e}_s,{t}")),
            );
            if let Some(e) = &report.error {
                lines.push(format!("error,\"{}\"", e.replace('"', "'")));
            }
            lines.join("\n") + "\n"
        }
    };
    stdout.write_all(text.as_bytes()).map_err(stdout_err)?;
    match verdict {
        Ok(()) => Ok(()),
        Err(e) => Err(Failure::invalid(format!("transfer plan rejected: {e}"))),
    }
}

pub fn sweep(a: &SweepArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let l = load(&a.inputs)?;
    let strategies = parse_strategies(&a.strategy)?;
    let scenarios = select(&l, &a.selection)?;
    let result = run_sweep(&scenarios, &strategies, &l.machine, &l.tables, &l.params)?;
    match (a.output.format, &a.output.out) {
        (Format::Json, _) => emit(&a.output, &json(&result), stdout),
        (Format::Csv, Some(out)) => {
            write_atomic(out, &result.rows_csv())?;
            write_atomic(&summary_path(out), &result.aggregates_csv())?;
            let overall: Vec<_> = strategies
                .iter()
                .filter_map(|&s| result.overall_mean(s).map(|m| format!("{s},{m:.4}")))
                .collect();
            let text = format!("strategy,mean_fraction_of_ideal\n{}\n", overall.join("\n"));
            stdout.write_all(text.as_bytes()).map_err(stdout_err)
        }
        (Format::Csv, None) => {
            let text = format!("{}\n{}", result.rows_csv(), result.aggregates_csv());
            stdout.write_all(text.as_bytes()).map_err(stdout_err)
        }
    }
}

pub fn calibrate(a: &CalibrateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let l = load(&a.inputs)?;
    let measured = load_measured(&a.measured)?;
    let result = fit(&measured, &l.dataset, &l.machine, &l.tables, &l.params)?;
    let report = match a.output.format {
        Format::Json => json(&result),
        Format::Csv => csv_of(&result.residuals),
    };
    let params = result.params.to_json() + "\n";
    match &a.output.out {
        Some(p) => {
            write_atomic(p, &params)?;
            stdout.write_all(report.as_bytes()).map_err(stdout_err)?;
        }
        None => {
            stdout.write_all(params.as_bytes()).map_err(stdout_err)?;
            stderr.write_all(report.as_bytes()).map_err(stdout_err)?;
        }
    }
    writeln!(
        stderr,
        "rms error {:.3e} over {} points, {} iterations",
        result.rms_error,
        result.residuals.len(),
        result.iterations
    )
    .map_err(stdout_err)
}
