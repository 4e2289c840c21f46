//! Plot-ready tables and a text summary derived from a finished run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use seta_core::blockgrid::{parse_trace, selections_by_task};
use seta_core::gating::parse_audit_csv;
use seta_core::metrics::{capacity_report, parse_table, utilization_csv, write_rows, AccuracyMatrix, CapacityLedger, CapacityRow};
use seta_core::sos::{growth_curve, GrowthPoint};

use crate::artifacts::{read_artifact, RunManifest, ACCURACY, AUDIT, CAPACITY, TRACE};
use crate::CliError;

pub const COMPOSITION: &str = "composition.csv";
pub const GROWTH: &str = "growth.csv";
pub const UTILIZATION: &str = "utilization.csv";
pub const ACTIVE_EXPERTS: &str = "active_experts.csv";
pub const SUMMARY: &str = "summary.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertUsage {
    pub expert_id: u64,
    /// Samples on which the expert was among the top-k.
    pub active_samples: usize,
    pub active_pct: f64,
    pub mean_softmax_weight: f64,
}

#[derive(Clone, Debug)]
pub struct ReportSummary {
    pub out_dir: PathBuf,
    pub files: Vec<&'static str>,
    pub text: String,
}

fn integrity(msg: impl Into<String>) -> CliError {
    CliError::new(crate::EXIT_FAILURE, msg)
}

/// `step,shared,unique_t1..unique_tN,total`, one row per step.
pub fn composition_csv(ledger: &CapacityLedger) -> String {
    let n = ledger.rows.iter().map(|r| r.unique.len()).max().unwrap_or(0);
    let mut header = vec!["step".to_string(), "shared".to_string()];
    header.extend((1..=n).map(|t| format!("unique_t{t}")));
    header.push("total".into());
    write_rows(
        &header,
        ledger.rows.iter().map(|r| {
            let mut row = vec![r.step.to_string(), r.shared.to_string()];
            row.extend((0..n).map(|i| r.unique.get(i).copied().unwrap_or(0).to_string()));
            row.push(r.total.to_string());
            row
        }),
    )
}

fn count(v: Option<f64>, line: usize) -> Result<usize, CliError> {
    match v {
        Some(x) if x >= 0.0 && x.fract() == 0.0 => Ok(x as usize),
        _ => Err(integrity(format!("line {line}: expected a count, got {v:?}"))),
    }
}

pub fn parse_composition(text: &str) -> Result<Vec<CapacityRow>, CliError> {
    let t = parse_table(text)?;
    let mut out = Vec::new();
    for (i, (label, cells)) in t.labels.iter().zip(&t.cells).enumerate() {
        let line = i + 2;
        let step = label.parse().map_err(|_| integrity(format!("line {line}: bad step {label:?}")))?;
        let values = cells.iter().map(|c| count(*c, line)).collect::<Result<Vec<_>, _>>()?;
        let (total, rest) = values.split_last().ok_or_else(|| integrity(format!("line {line}: empty row")))?;
        let (shared, unique) = rest.split_first().ok_or_else(|| integrity(format!("line {line}: no shared column")))?;
        out.push(CapacityRow { step, task_added: step, total: *total, shared: *shared, unique: unique.to_vec() });
    }
    Ok(out)
}

pub fn growth_csv(points: &[GrowthPoint]) -> String {
    let header = ["step", "sos_total", "independent_total"].map(String::from);
    write_rows(
        &header,
        points
            .iter()
            .map(|p| vec![p.step.to_string(), p.sos_total.to_string(), p.independent_total.to_string()]),
    )
}

pub fn parse_growth(text: &str) -> Result<Vec<GrowthPoint>, CliError> {
    let t = parse_table(text)?;
    t.labels
        .iter()
        .zip(&t.cells)
        .enumerate()
        .map(|(i, (label, c))| {
            let line = i + 2;
            Ok(GrowthPoint {
                step: label.parse().map_err(|_| integrity(format!("line {line}: bad step {label:?}")))?,
                sos_total: count(c.first().copied().flatten(), line)?,
                independent_total: count(c.get(1).copied().flatten(), line)?,
            })
        })
        .collect()
}

pub fn expert_usage(audit: &[seta_core::gating::AuditRow]) -> Vec<ExpertUsage> {
    let samples: BTreeSet<usize> = audit.iter().map(|r| r.sample_id).collect();
    let mut by_expert: BTreeMap<u64, (usize, f64, usize)> = BTreeMap::new();
    for r in audit {
        let e = by_expert.entry(r.expert_id.0).or_default();
        e.0 += usize::from(r.active);
        e.1 += r.softmax_weight;
        e.2 += 1;
    }
    by_expert
        .into_iter()
        .map(|(expert_id, (active, weight, rows))| ExpertUsage {
            expert_id,
            active_samples: active,
            active_pct: 100.0 * active as f64 / samples.len().max(1) as f64,
            mean_softmax_weight: weight / rows as f64,
        })
        .collect()
}

pub fn active_experts_csv(rows: &[ExpertUsage]) -> String {
    let header = ["expert_id", "active_samples", "active_pct", "mean_softmax_weight"].map(String::from);
    write_rows(
        &header,
        rows.iter().map(|u| {
            vec![
                u.expert_id.to_string(),
                u.active_samples.to_string(),
                format!("{:?}", u.active_pct),
                format!("{:?}", u.mean_softmax_weight),
            ]
        }),
    )
}

pub fn parse_active_experts(text: &str) -> Result<Vec<ExpertUsage>, CliError> {
    let t = parse_table(text)?;
    t.labels
        .iter()
        .zip(&t.cells)
        .enumerate()
        .map(|(i, (label, c))| {
            let line = i + 2;
            let val = |k: usize| c.get(k).copied().flatten().ok_or_else(|| integrity(format!("line {line}: column {k} empty")));
            Ok(ExpertUsage {
                expert_id: label.parse().map_err(|_| integrity(format!("line {line}: bad expert id {label:?}")))?,
                active_samples: count(c.first().copied().flatten(), line)?,
                active_pct: val(1)?,
                mean_softmax_weight: val(2)?,
            })
        })
        .collect()
}

fn summary_text(manifest: &RunManifest, matrix: &AccuracyMatrix, ledger: &CapacityLedger, growth: &[GrowthPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method: {}", manifest.method);
    let _ = writeln!(s, "status: {:?}", manifest.status);
    let _ = writeln!(s, "seed: {}", manifest.seed);
    let _ = writeln!(s, "tasks trained: {} of {}", matrix.tasks(), manifest.tasks.len());
    if let Ok(r) = matrix.retention_rt() {
        let _ = writeln!(s, "retention (mean final accuracy): {r:.2}");
    }
    if let Ok(f) = matrix.forgetting_ft() {
        let _ = writeln!(s, "forgetting (mean peak minus final): {f:.2}");
    }
    if let Some(last) = matrix.rows().last() {
        let cells: Vec<String> = last.iter().map(|v| format!("{v:.1}")).collect();
        let _ = writeln!(s, "final accuracies: {}", cells.join(" "));
    }
    if let Some(r) = ledger.rows.last() {
        let _ = writeln!(s, "owned blocks: {} (shared {}, {:.1}%)", r.total, r.shared, r.shared_pct());
    }
    if let Some(g) = growth.last() {
        let ratio = g.sos_total as f64 / g.independent_total.max(1) as f64;
        let _ = writeln!(s, "growth: {} blocks with sharing vs {} independent (ratio {ratio:.3})", g.sos_total, g.independent_total);
    }
    if !manifest.experts.is_empty() {
        let frozen = manifest.experts.iter().filter(|e| e.frozen).count();
        let _ = writeln!(s, "experts: {} ({} frozen)", manifest.experts.len(), frozen);
    }
    if let Some(e) = &manifest.error {
        let _ = writeln!(s, "error: {e}");
    }
    s
}

/// Read the artifacts in `run_dir` and write the report tables to `out_dir`.
pub fn report(run_dir: &Path, out_dir: &Path) -> Result<ReportSummary, CliError> {
    let manifest = RunManifest::read(run_dir)?;
    let ledger = CapacityLedger::from_csv(&read_artifact(run_dir, CAPACITY)?)?;
    let matrix = AccuracyMatrix::from_csv(&read_artifact(run_dir, ACCURACY)?)?;
    let trace = parse_trace(&read_artifact(run_dir, TRACE)?)?;
    let audit = parse_audit_csv(&read_artifact(run_dir, AUDIT)?)?;

    ledger.check_identity()?;
    let utilization = capacity_report(&ledger)?;
    let base = manifest.config.model.build_base(manifest.seed)?;
    let selections: Vec<_> = selections_by_task(&trace).into_values().collect();
    let growth = growth_curve(&selections, base.grid(), &manifest.config.sos)?;
    let usage = expert_usage(&audit);
    let text = summary_text(&manifest, &matrix, &ledger, &growth);

    fs::create_dir_all(out_dir)?;
    let files = [
        (COMPOSITION, composition_csv(&ledger)),
        (GROWTH, growth_csv(&growth)),
        (UTILIZATION, utilization_csv(&utilization)),
        (ACTIVE_EXPERTS, active_experts_csv(&usage)),
        (SUMMARY, text.clone()),
    ];
    for (name, body) in &files {
        fs::write(out_dir.join(name), body)?;
    }
    Ok(ReportSummary { out_dir: out_dir.to_path_buf(), files: files.iter().map(|(n, _)| *n).collect(), text })
}
