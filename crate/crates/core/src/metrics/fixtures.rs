//! Published reference tables bundled as test data, and the checks that
//! recompute every published number from them.

use std::path::Path;

use serde::Serialize;

use super::{gen_loss, parse_table, AccuracyMatrix, CapacityLedger, Table};
use crate::error::{Error, Result};

pub const ACCURACY: &str = "accuracy_matrix.csv";
pub const GENERAL: &str = "general_scores.csv";
pub const CAPACITY_980: &str = "capacity_budget_980.csv";
pub const CAPACITY_1280: &str = "capacity_budget_1280.csv";
pub const SHARED_PCT: &str = "shared_pct.csv";
pub const TARGETS: &str = "metric_targets.csv";

pub const FILES: [&str; 6] = [ACCURACY, GENERAL, CAPACITY_980, CAPACITY_1280, SHARED_PCT, TARGETS];

/// Tolerance on published shared percentages, which are rounded to one decimal.
pub const SHARED_PCT_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixtureSet {
    pub accuracy: String,
    pub general: String,
    pub capacity_980: String,
    pub capacity_1280: String,
    pub shared_pct: String,
    pub targets: String,
}

impl FixtureSet {
    pub fn embedded() -> Self {
        Self {
            accuracy: include_str!("../../fixtures/accuracy_matrix.csv").to_string(),
            general: include_str!("../../fixtures/general_scores.csv").to_string(),
            capacity_980: include_str!("../../fixtures/capacity_budget_980.csv").to_string(),
            capacity_1280: include_str!("../../fixtures/capacity_budget_1280.csv").to_string(),
            shared_pct: include_str!("../../fixtures/shared_pct.csv").to_string(),
            targets: include_str!("../../fixtures/metric_targets.csv").to_string(),
        }
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(p),
                _ => Error::Io(e),
            })
        };
        Ok(Self {
            accuracy: read(ACCURACY)?,
            general: read(GENERAL)?,
            capacity_980: read(CAPACITY_980)?,
            capacity_1280: read(CAPACITY_1280)?,
            shared_pct: read(SHARED_PCT)?,
            targets: read(TARGETS)?,
        })
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in FILES.iter().zip(self.texts()) {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }

    fn texts(&self) -> [&str; 6] {
        [&self.accuracy, &self.general, &self.capacity_980, &self.capacity_1280, &self.shared_pct, &self.targets]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, expected: f64, actual: f64, tolerance: f64) -> Self {
        let passed = (expected - actual).abs() <= tolerance + 1e-12;
        Self { name: name.into(), expected, actual, tolerance, passed, detail: String::new() }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: expected {} ± {}, got {:.4}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.expected,
            self.tolerance,
            self.actual
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

fn targets(table: &Table) -> Result<Vec<(String, f64, f64)>> {
    table
        .labels
        .iter()
        .zip(&table.cells)
        .map(|(name, c)| match (c.first().copied().flatten(), c.get(1).copied().flatten()) {
            (Some(v), Some(t)) => Ok((name.clone(), v, t)),
            _ => Err(Error::Parse { line: 0, msg: format!("target {name} needs a value and a tolerance") }),
        })
        .collect()
}

fn score_row(table: &Table, name: &str) -> Result<Vec<f64>> {
    let i = table
        .labels
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| Error::Parse { line: 0, msg: format!("no row named {name}") })?;
    table.cells[i]
        .iter()
        .map(|c| c.ok_or_else(|| Error::Parse { line: i + 2, msg: format!("empty score in {name}") }))
        .collect()
}

/// Cells where `given` differs from the bundled matrix, e.g. `[6][2] 26.00 vs 25.00`.
fn differing_cells(given: &Table, reference: &Table) -> Vec<String> {
    let mut out = Vec::new();
    for (i, (g, r)) in given.cells.iter().zip(&reference.cells).enumerate() {
        for (j, (a, b)) in g.iter().zip(r).enumerate() {
            if a != b {
                let fmt = |v: &Option<f64>| v.map_or("empty".to_string(), |x| format!("{x:.2}"));
                out.push(format!("[{}][{}] {} vs bundled {}", i + 1, j + 1, fmt(a), fmt(b)));
            }
        }
    }
    out
}

/// Recompute every published metric from `set`.
pub fn verify(set: &FixtureSet) -> Result<Vec<Check>> {
    let acc_table = parse_table(&set.accuracy)?;
    let matrix = AccuracyMatrix::from_csv(&set.accuracy)?;
    let general = parse_table(&set.general)?;
    let wanted = targets(&parse_table(&set.targets)?)?;
    let reference = parse_table(&FixtureSet::embedded().accuracy)?;
    let changed = differing_cells(&acc_table, &reference);

    let zero = score_row(&general, "zero_shot")?;
    let mut checks = Vec::new();
    for (name, expected, tol) in wanted {
        let actual = match name.as_str() {
            "retention" => matrix.retention_rt()?,
            "forgetting" => matrix.forgetting_ft()?,
            n if n.starts_with("acc_") => {
                let t: usize = n[4..]
                    .parse()
                    .map_err(|_| Error::Parse { line: 0, msg: format!("bad target {n}") })?;
                matrix.acc_t(t)?
            }
            n if n.starts_with("gen_loss_") => gen_loss(&zero, &score_row(&general, &n[9..])?)?,
            n => return Err(Error::Parse { line: 0, msg: format!("unknown target {n}") }),
        };
        let mut c = Check::new(name, expected, actual, tol);
        if !c.passed && !changed.is_empty() && !c.name.starts_with("gen_loss") {
            c.detail = format!("matrix cells changed: {}", changed.join(", "));
        }
        checks.push(c);
    }

    let published = parse_table(&set.shared_pct)?;
    for (col, (label, text)) in [("budget_980", &set.capacity_980), ("budget_1280", &set.capacity_1280)]
        .into_iter()
        .enumerate()
    {
        let ledger = CapacityLedger::from_csv(text)?;
        let broken: Vec<String> = ledger
            .rows
            .iter()
            .filter(|r| r.check().is_err())
            .map(|r| format!("step {}", r.step))
            .collect();
        let mut c = Check::new(format!("{label} accounting identity (rows failing)"), 0.0, broken.len() as f64, 0.0);
        c.detail = broken.join(", ");
        checks.push(c);
        let col_idx = published
            .header
            .iter()
            .position(|h| h == label)
            .unwrap_or(col);
        for (row, cells) in ledger.rows.iter().zip(&published.cells) {
            let expected = cells.get(col_idx).copied().flatten().unwrap_or(f64::NAN);
            checks.push(Check::new(
                format!("{label} shared% step {}", row.step),
                expected,
                row.shared_pct(),
                SHARED_PCT_TOLERANCE,
            ));
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_pass() {
        let checks = verify(&FixtureSet::embedded()).unwrap();
        assert_eq!(checks.len(), 6 + 2 * 7);
        for c in &checks {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn perturbed_cell_is_named() {
        let mut set = FixtureSet::embedded();
        set.accuracy = set.accuracy.replace("6,34.80,25.00", "6,34.80,26.00");
        let checks = verify(&set).unwrap();
        let rt = checks.iter().find(|c| c.name == "retention").unwrap();
        assert!(!rt.passed);
        assert!(rt.detail.contains("[6][2]"), "{}", rt.detail);
    }
}
