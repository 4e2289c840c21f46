//! Continual-learning metrics over an accuracy matrix, capacity accounting and
//! bundled reference fixtures.

mod capacity;
pub mod fixtures;

pub use capacity::{
    capacity_report, compare_shared_pct, parse_utilization_csv, utilization_csv, CapacityLedger, CapacityRow,
    Utilization,
};

use crate::error::{Error, Result};

/// Numeric table with a leading label column; empty cells become `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub labels: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn parse_table(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Parse { line: 1, msg: "table needs a label column and at least one value column".into() });
    }
    let mut labels = Vec::new();
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        labels.push(record[0].to_string());
        let mut row = Vec::with_capacity(record.len() - 1);
        for field in record.iter().skip(1) {
            if field.is_empty() {
                row.push(None);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|e| Error::Parse { line, msg: format!("{field:?}: {e}") })?;
                row.push(Some(v));
            }
        }
        cells.push(row);
    }
    Ok(Table { header: header[1..].to_vec(), labels, cells })
}

/// Serialize rows as CSV under `header`.
pub fn write_rows(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

/// Lower-triangular accuracy matrix in percent: `row(i)[j]` is the accuracy on
/// task `j` after training task `i` (both 1-based in the accessors).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    pub task_names: Vec<String>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Append the row for the next training step; it must cover every task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let want = self.rows.len() + 1;
        if row.len() != want {
            return Err(Error::LengthMismatch(format!("row {want} needs {want} entries, got {}", row.len())));
        }
        if let Some((j, v)) = row.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 100.0) {
            return Err(Error::Integrity(format!("cell [{want}][{}] = {v} is outside [0, 100]", j + 1)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()
    }

    /// Mean of row `t`.
    pub fn acc_t(&self, t: usize) -> Result<f64> {
        let row = t
            .checked_sub(1)
            .and_then(|i| self.rows.get(i))
            .ok_or_else(|| Error::State(format!("row {t} is not filled (matrix has {} rows)", self.rows.len())))?;
        Ok(row.iter().sum::<f64>() / t as f64)
    }

    /// Mean of the final row.
    pub fn retention_rt(&self) -> Result<f64> {
        self.acc_t(self.rows.len())
    }

    /// Mean over `j < T` of the drop from the best accuracy on `j` while tasks
    /// `j..T-1` were the latest, to the final accuracy on `j`.
    pub fn forgetting_ft(&self) -> Result<f64> {
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::UndefinedMetric("forgetting needs at least 2 tasks".into()));
        }
        let last = &self.rows[t - 1];
        let total: f64 = (0..t - 1)
            .map(|j| {
                let peak = (j..t - 1).map(|l| self.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
                peak - last[j]
            })
            .sum();
        Ok(total / (t - 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut header = vec!["step".to_string()];
        header.extend((1..=t).map(|j| {
            self.task_names.get(j - 1).cloned().unwrap_or_else(|| format!("task_{j}"))
        }));
        let rows = self.rows.iter().enumerate().map(|(i, r)| {
            let mut out = vec![(i + 1).to_string()];
            out.extend((0..t).map(|j| r.get(j).map(|v| format!("{v:?}")).unwrap_or_default()));
            out
        });
        write_rows(&header, rows)
    }

    /// Read a matrix written by [`AccuracyMatrix::to_csv`]. Cells above the
    /// diagonal are ignored, so full published tables also load.
    pub fn from_csv(text: &str) -> Result<Self> {
        let table = parse_table(text)?;
        let mut m = Self { rows: Vec::new(), task_names: table.header.clone() };
        for (i, row) in table.cells.iter().enumerate() {
            let mut lower = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let v = row
                    .get(j)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Parse { line: i + 2, msg: format!("cell [{}][{}] is empty", i + 1, j + 1) })?;
                lower.push(v);
            }
            m.push_row(lower)?;
        }
        Ok(m)
    }
}

/// Mean over benchmarks of `post - zero_shot`.
pub fn gen_loss(zero_shot: &[f64], post: &[f64]) -> Result<f64> {
    if zero_shot.len() != post.len() {
        return Err(Error::LengthMismatch(format!("{} zero-shot scores vs {} post scores", zero_shot.len(), post.len())));
    }
    if zero_shot.is_empty() {
        return Err(Error::UndefinedMetric("no benchmarks".into()));
    }
    Ok(zero_shot.iter().zip(post).map(|(z, p)| p - z).sum::<f64>() / zero_shot.len() as f64)
}
