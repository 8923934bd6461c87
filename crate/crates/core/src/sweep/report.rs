use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{fmt_f64, parse_f64, RunRecord, METRIC_COLUMNS};
use crate::error::{Error, Result};
use crate::selection::{best_per_interval, upper_convex_hull, FrontierPoint, RateInterval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Max,
    Min,
}

/// Metrics summarized by [`report`] and whether larger or smaller is better.
pub const REPORT_METRICS: [(&str, Direction); 11] = [
    ("psnr", Direction::Max),
    ("elbo", Direction::Max),
    ("is", Direction::Max),
    ("best_accuracy", Direction::Max),
    ("acc_logreg_mu2", Direction::Max),
    ("acc_knn_mu2", Direction::Max),
    ("acc_logreg_mu1", Direction::Max),
    ("acc_knn_mu1", Direction::Max),
    ("mi_z2", Direction::Max),
    ("mi_z1", Direction::Max),
    ("D", Direction::Min),
];

/// The winning cell for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub metric: String,
    pub direction: Direction,
    pub grid_i: usize,
    pub grid_j: usize,
    pub beta_2: f64,
    pub beta_1: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: usize,
    pub failed: usize,
    pub best: Vec<Best>,
}

impl Report {
    pub fn best(&self, metric: &str) -> Option<&Best> {
        self.best.iter().find(|b| b.metric == metric)
    }
}

fn column_value(r: &RunRecord, metric: &str) -> f64 {
    if metric == "best_accuracy" {
        r.best_accuracy()
    } else {
        r.metric(metric).unwrap_or(f64::NAN)
    }
}

/// Best successful cell per metric. Rows are scanned in grid order and a
/// later row must be strictly better to win, so ties go to the first cell.
/// NaN values are skipped; metrics with no finite-or-infinite values are omitted.
pub fn report(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::invalid("no runs to report on"));
    }
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.grid_i, r.grid_j));
    let ok: Vec<&RunRecord> = sorted.iter().copied().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::invalid("every run failed; nothing to report"));
    }
    let mut best = Vec::new();
    for (metric, direction) in REPORT_METRICS {
        let mut winner: Option<(&RunRecord, f64)> = None;
        for r in &ok {
            let v = column_value(r, metric);
            if v.is_nan() {
                continue;
            }
            let better = match (winner, direction) {
                (None, _) => true,
                (Some((_, w)), Direction::Max) => v > w,
                (Some((_, w)), Direction::Min) => v < w,
            };
            if better {
                winner = Some((r, v));
            }
        }
        if let Some((r, v)) = winner {
            best.push(Best {
                metric: metric.to_string(),
                direction,
                grid_i: r.grid_i,
                grid_j: r.grid_j,
                beta_2: r.beta_2,
                beta_1: r.beta_1,
                value: v,
            });
        }
    }
    Ok(Report {
        cells: records.len(),
        failed: records.len() - ok.len(),
        best,
    })
}

/// Whitespace-separated matrix of one metric: row `i` is the `beta_2`
/// index, column `j` the `beta_1` index. Missing or failed cells are `nan`.
pub fn plot_matrix(records: &[RunRecord], metric: &str) -> String {
    let rows = records.iter().map(|r| r.grid_i + 1).max().unwrap_or(0);
    let cols = records.iter().map(|r| r.grid_j + 1).max().unwrap_or(0);
    let mut grid = vec![vec![f64::NAN; cols]; rows];
    let mut b2 = vec![f64::NAN; rows];
    let mut b1 = vec![f64::NAN; cols];
    for r in records {
        b2[r.grid_i] = r.beta_2;
        b1[r.grid_j] = r.beta_1;
        if r.is_ok() {
            grid[r.grid_i][r.grid_j] = column_value(r, metric);
        }
    }
    let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let _ = writeln!(out, "# metric={metric} rows=beta_2 cols=beta_1");
    let _ = writeln!(out, "# beta_2: {}", join(&b2));
    let _ = writeln!(out, "# beta_1: {}", join(&b1));
    for row in &grid {
        let _ = writeln!(out, "{}", join(row));
    }
    out
}

/// Writes `report.json` and one `plot_<metric>.dat` per metric into `dir`.
pub fn write_report(records: &[RunRecord], dir: &Path) -> Result<Report> {
    let rep = report(records)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
    for metric in METRIC_COLUMNS.iter().copied().chain(["best_accuracy"]) {
        std::fs::write(dir.join(format!("plot_{metric}.dat")), plot_matrix(records, metric))?;
    }
    Ok(rep)
}

/// A hull vertex, identified by its 0-based data row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullRow {
    pub row: usize,
    pub x: f64,
    /// The metric as it appears in the table (not negated).
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullSelection {
    pub x_column: String,
    pub y_column: String,
    pub maximize: bool,
    pub hull: Vec<HullRow>,
    /// Rate intervals and the data row best in each.
    pub intervals: Vec<RateInterval>,
    /// `(row, reason)` for rows left out of the hull computation.
    pub excluded: Vec<(usize, String)>,
}

/// Upper hull of `(x_column, ±y_column)` over a CSV table (comment lines
/// starting with `#` are kept). When `maximize` is false the metric is
/// negated first, so the hull selects low values. Rows with a `status`
/// other than `ok`, or with non-numeric or infinite values, are excluded.
/// Returns the table with an `on_hull` column appended, and the selection.
pub fn hull_table(text: &str, x_column: &str, y_column: &str, maximize: bool) -> Result<(String, HullSelection)> {
    let comments: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("unknown column {name:?}; available: {}", header.join(", "))))
    };
    let (xi, yi) = (find(x_column)?, find(y_column)?);
    let status = header.iter().position(|h| h == "status");
    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;

    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for (row, rec) in rows.iter().enumerate() {
        if let Some(s) = status {
            if &rec[s] != "ok" {
                excluded.push((row, format!("status {}", &rec[s])));
                continue;
            }
        }
        let (x, y) = match (parse_f64(&rec[xi]), parse_f64(&rec[yi])) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                excluded.push((row, "non-numeric value".into()));
                continue;
            }
        };
        if !x.is_finite() || !y.is_finite() {
            excluded.push((row, format!("non-finite point ({}, {})", fmt_f64(x), fmt_f64(y))));
            continue;
        }
        points.push(FrontierPoint::new(row, x, if maximize { y } else { -y }));
    }
    if points.is_empty() {
        return Err(Error::invalid("no usable rows for hull selection"));
    }
    let hull = upper_convex_hull(&points)?;
    let intervals = best_per_interval(&hull)?;
    let on_hull: BTreeMap<usize, ()> = hull.iter().map(|p| (p.id, ())).collect();

    let mut out = Vec::new();
    for c in &comments {
        out.extend_from_slice(c.as_bytes());
        out.push(b'\n');
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut h = header.clone();
        h.push("on_hull".into());
        w.write_record(&h)?;
        for (row, rec) in rows.iter().enumerate() {
            let mut fields: Vec<&str> = rec.iter().collect();
            fields.push(if on_hull.contains_key(&row) { "1" } else { "0" });
            w.write_record(&fields)?;
        }
        w.flush()?;
    }
    let selection = HullSelection {
        x_column: x_column.to_string(),
        y_column: y_column.to_string(),
        maximize,
        hull: hull
            .iter()
            .map(|p| HullRow {
                row: p.id,
                x: p.x,
                y: if maximize { p.y } else { -p.y },
            })
            .collect(),
        intervals,
        excluded,
    };
    Ok((String::from_utf8(out).expect("csv output is utf-8"), selection))
}
