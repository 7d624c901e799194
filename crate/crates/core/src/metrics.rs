//! Accuracy-matrix bookkeeping, average performance/forgetting and
//! distribution distances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular matrix: `row i` holds accuracies on tasks `0..=i` after
/// training task `i`. Cells above the diagonal are absent, never zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    task_ids: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(task_ids: Vec<String>) -> Self {
        let rows = (0..task_ids.len()).map(|i| vec![None; i + 1]).collect();
        AccuracyMatrix { task_ids, rows }
    }

    /// Builds a fully populated matrix from triangular rows.
    pub fn from_rows(task_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(task_ids);
        if rows.len() != m.t() {
            return Err(Error::DimensionMismatch {
                expected: m.t(),
                found: rows.len(),
            });
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::DimensionMismatch {
                    expected: i + 1,
                    found: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn t(&self) -> usize {
        self.task_ids.len()
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    /// Records `a[i][j]`. Only `j <= i` is defined; values must lie in [0, 1].
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.t() || j > i {
            return Err(Error::Config(format!("cell ({i},{j}) is outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("accuracy {value} at ({i},{j}) is outside [0,1]")));
        }
        self.rows[i][j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or(Error::IncompleteMatrix { row: i, col: j })
    }

    pub fn final_row(&self) -> Result<Vec<f64>> {
        let last = self.t().checked_sub(1).ok_or(Error::IncompleteMatrix { row: 0, col: 0 })?;
        (0..self.t()).map(|j| self.require(last, j)).collect()
    }

    /// CSV with a header of task ids and blanks for undefined cells.
    pub fn to_csv(&self) -> String {
        let mut out = self.task_ids.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = (0..self.t())
                .map(|j| match row.get(j).copied().flatten() {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::schema("header", "empty accuracy matrix file"))?;
        let ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut m = AccuracyMatrix::new(ids);
        for (i, line) in lines.enumerate() {
            if i >= m.t() {
                return Err(Error::schema("row", "more rows than tasks").at_line(i + 2));
            }
            for (j, cell) in line.split(',').enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::schema("cell", format!("not a number: `{cell}`")).at_line(i + 2))?;
                m.set(i, j, v).map_err(|e| Error::schema("cell", e.to_string()).at_line(i + 2))?;
            }
        }
        Ok(m)
    }
}

/// AP: mean of the final row.
pub fn average_performance(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// AF: mean over earlier tasks of peak accuracy before the last task minus
/// final accuracy. Negative values (backward transfer) are kept.
pub fn average_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.t();
    if t < 2 {
        return Err(Error::UndefinedForSingleTask);
    }
    let last = t - 1;
    let mut total = 0.0;
    for j in 0..last {
        let mut peak = f64::NEG_INFINITY;
        for i in j..last {
            peak = peak.max(m.require(i, j)?);
        }
        total += peak - m.require(last, j)?;
    }
    Ok(total / last as f64)
}

/// Half the L1 distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AF")]
    pub af: Option<f64>,
    pub per_task_final: BTreeMap<String, f64>,
    pub tv_per_task: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn from_matrix(m: &AccuracyMatrix, tv_per_task: BTreeMap<String, f64>) -> Result<Self> {
        let row = m.final_row()?;
        Ok(MetricsReport {
            ap: average_performance(m)?,
            af: match average_forgetting(m) {
                Ok(v) => Some(v),
                Err(Error::UndefinedForSingleTask) => None,
                Err(e) => return Err(e),
            },
            per_task_final: m.task_ids().iter().cloned().zip(row).collect(),
            tv_per_task,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn worked() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(ids(3), &[vec![0.9], vec![0.7, 0.8], vec![0.6, 0.75, 0.85]]).unwrap()
    }

    #[test]
    fn worked_example() {
        let m = worked();
        assert!((average_performance(&m).unwrap() - 2.2 / 3.0).abs() < 1e-12);
        assert!((average_forgetting(&m).unwrap() - 0.175).abs() < 1e-12);
    }

    #[test]
    fn negative_forgetting_is_kept() {
        let m = AccuracyMatrix::from_rows(ids(2), &[vec![0.5], vec![0.9, 0.7]]).unwrap();
        assert!((average_forgetting(&m).unwrap() + 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let m = AccuracyMatrix::from_rows(ids(1), &[vec![0.42]]).unwrap();
        assert_eq!(average_performance(&m).unwrap(), 0.42);
        assert!(matches!(average_forgetting(&m), Err(Error::UndefinedForSingleTask)));
        let r = MetricsReport::from_matrix(&m, BTreeMap::new()).unwrap();
        assert_eq!(r.af, None);
        assert!(serde_json::to_string(&r).unwrap().contains("\"AF\":null"));
    }

    #[test]
    fn incomplete_matrix() {
        let mut m = AccuracyMatrix::new(ids(2));
        m.set(0, 0, 0.5).unwrap();
        m.set(1, 1, 0.5).unwrap();
        assert!(matches!(average_performance(&m), Err(Error::IncompleteMatrix { row: 1, col: 0 })));
        assert!(m.set(0, 1, 0.5).is_err());
        assert!(m.set(1, 0, 1.5).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((total_variation(&[0.551, 0.449], &[0.886, 0.114]).unwrap() - 0.335).abs() < 1e-12);
        assert!(total_variation(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn csv_round_trip_keeps_blanks() {
        let m = worked();
        let csv = m.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "0.9,,");
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap(), m);
    }
}
