use serde::{Deserialize, Serialize};

use super::{parse_table, write_rows};
use crate::error::{Error, Result};

/// Block ownership after one step: `total = shared + Σ unique`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub step: usize,
    pub task_added: usize,
    pub total: usize,
    pub shared: usize,
    /// Unique blocks per task, index 0 is task 1.
    pub unique: Vec<usize>,
}

impl CapacityRow {
    pub fn check(&self) -> Result<()> {
        let sum = self.shared + self.unique.iter().sum::<usize>();
        if sum != self.total {
            return Err(Error::Integrity(format!(
                "capacity row step {}: total {} != shared {} + unique {:?} = {sum}",
                self.step, self.total, self.shared, self.unique
            )));
        }
        Ok(())
    }

    pub fn shared_pct(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.shared as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityLedger {
    pub rows: Vec<CapacityRow>,
}

impl CapacityLedger {
    pub fn check_identity(&self) -> Result<()> {
        self.rows.iter().try_for_each(CapacityRow::check)
    }

    fn width(&self) -> usize {
        self.rows.iter().map(|r| r.unique.len()).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let n = self.width();
        let mut header: Vec<String> = ["step", "total", "shared"].map(String::from).to_vec();
        header.extend((1..=n).map(|t| format!("unique_t{t}")));
        let rows = self.rows.iter().map(|r| {
            let mut out = vec![r.step.to_string(), r.total.to_string(), r.shared.to_string()];
            out.extend((0..n).map(|i| r.unique.get(i).map(|u| u.to_string()).unwrap_or_default()));
            out
        });
        write_rows(&header, rows)
    }

    /// Parse `step,total,shared,unique_t1,...`. Trailing empty unique cells are dropped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let table = parse_table(text)?;
        if table.header.len() < 2 || table.header[0] != "total" || table.header[1] != "shared" {
            return Err(Error::Parse { line: 1, msg: "expected header step,total,shared,unique_t1,...".into() });
        }
        let mut rows = Vec::new();
        for (i, (label, cells)) in table.labels.iter().zip(&table.cells).enumerate() {
            let line = i + 2;
            let int = |v: Option<f64>, what: &str| -> Result<usize> {
                match v {
                    Some(x) if x >= 0.0 && x.fract() == 0.0 => Ok(x as usize),
                    Some(x) => Err(Error::Parse { line, msg: format!("{what} = {x} is not a count") }),
                    None => Err(Error::Parse { line, msg: format!("{what} is empty") }),
                }
            };
            let step: usize = label.parse().map_err(|e| Error::Parse { line, msg: format!("step {label:?}: {e}") })?;
            let mut unique = Vec::new();
            let filled = cells[2..].iter().rposition(Option::is_some).map_or(0, |p| p + 1);
            for (t, v) in cells[2..2 + filled].iter().enumerate() {
                unique.push(int(*v, &format!("unique_t{}", t + 1))?);
            }
            rows.push(CapacityRow {
                step,
                task_added: step,
                total: int(cells[0], "total")?,
                shared: int(cells[1], "shared")?,
                unique,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub step: usize,
    pub total: usize,
    pub shared: usize,
    pub shared_pct: f64,
}

/// Shared share of owned blocks per step. Fails on the first row that breaks
/// the accounting identity.
pub fn capacity_report(ledger: &CapacityLedger) -> Result<Vec<Utilization>> {
    ledger.check_identity()?;
    Ok(ledger
        .rows
        .iter()
        .map(|r| Utilization { step: r.step, total: r.total, shared: r.shared, shared_pct: r.shared_pct() })
        .collect())
}

pub fn utilization_csv(rows: &[Utilization]) -> String {
    let header = ["step", "total", "shared", "shared_pct"].map(String::from);
    write_rows(
        &header,
        rows.iter().map(|u| vec![u.step.to_string(), u.total.to_string(), u.shared.to_string(), format!("{:?}", u.shared_pct)]),
    )
}

pub fn parse_utilization_csv(text: &str) -> Result<Vec<Utilization>> {
    let table = parse_table(text)?;
    table
        .labels
        .iter()
        .zip(&table.cells)
        .enumerate()
        .map(|(i, (label, c))| {
            let line = i + 2;
            let get = |k: usize| c.get(k).copied().flatten().ok_or(Error::Parse { line, msg: "empty cell".into() });
            Ok(Utilization {
                step: label.parse().map_err(|e| Error::Parse { line, msg: format!("{e}") })?,
                total: get(0)? as usize,
                shared: get(1)? as usize,
                shared_pct: get(2)?,
            })
        })
        .collect()
}

/// Side-by-side shared% series, one column per labelled ledger.
pub fn compare_shared_pct(series: &[(&str, &CapacityLedger)]) -> Result<String> {
    let mut reports = Vec::new();
    for (_, ledger) in series {
        reports.push(capacity_report(ledger)?);
    }
    let steps = reports.iter().map(Vec::len).max().unwrap_or(0);
    let mut header = vec!["step".to_string()];
    header.extend(series.iter().map(|(l, _)| l.to_string()));
    let rows = (0..steps).map(|i| {
        let mut out = vec![(i + 1).to_string()];
        out.extend(reports.iter().map(|r| r.get(i).map(|u| format!("{:.1}", u.shared_pct)).unwrap_or_default()));
        out
    });
    Ok(write_rows(&header, rows))
}
