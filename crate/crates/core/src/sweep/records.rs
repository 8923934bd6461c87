use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RunMetrics;

/// Version of the `runs.csv` layout, written in its leading comment.
pub const RUNS_FORMAT_VERSION: u32 = 1;

pub const RUN_COLUMNS: [&str; 25] = [
    "grid_i",
    "grid_j",
    "beta_2",
    "beta_1",
    "seed",
    "steps",
    "D",
    "R_z2",
    "R_z1_given_z2",
    "R_total",
    "psnr",
    "elbo",
    "is",
    "diversity",
    "sharpness",
    "mi_z2",
    "mi_z1",
    "acc_logreg_mu2",
    "acc_knn_mu2",
    "acc_logreg_mu1",
    "acc_knn_mu1",
    "bound_z2",
    "bound_z1",
    "wall_ms",
    "status",
];

/// Columns holding real-valued metrics, in file order.
pub const METRIC_COLUMNS: [&str; 17] = [
    "D",
    "R_z2",
    "R_z1_given_z2",
    "R_total",
    "psnr",
    "elbo",
    "is",
    "diversity",
    "sharpness",
    "mi_z2",
    "mi_z1",
    "acc_logreg_mu2",
    "acc_knn_mu2",
    "acc_logreg_mu1",
    "acc_knn_mu1",
    "bound_z2",
    "bound_z1",
];

/// One trained grid cell. "z2" refers to the upper layer bin and "z1" to
/// the lower one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub grid_i: usize,
    pub grid_j: usize,
    pub beta_2: f64,
    pub beta_1: f64,
    pub seed: u64,
    pub steps: usize,
    #[serde(rename = "D")]
    pub distortion: f64,
    #[serde(rename = "R_z2")]
    pub rate_z2: f64,
    #[serde(rename = "R_z1_given_z2")]
    pub rate_z1_given_z2: f64,
    #[serde(rename = "R_total")]
    pub rate_total: f64,
    pub psnr: f64,
    pub elbo: f64,
    pub is: f64,
    pub diversity: f64,
    pub sharpness: f64,
    pub mi_z2: f64,
    pub mi_z1: f64,
    pub acc_logreg_mu2: f64,
    pub acc_knn_mu2: f64,
    pub acc_logreg_mu1: f64,
    pub acc_knn_mu1: f64,
    pub bound_z2: f64,
    pub bound_z1: f64,
    pub wall_ms: u64,
    pub status: String,
}

impl RunRecord {
    /// A row for a cell whose run failed: every metric is NaN.
    pub fn failed(grid_i: usize, grid_j: usize, beta_2: f64, beta_1: f64, seed: u64, steps: usize, status: &str) -> Self {
        let nan = f64::NAN;
        Self {
            grid_i,
            grid_j,
            beta_2,
            beta_1,
            seed,
            steps,
            distortion: nan,
            rate_z2: nan,
            rate_z1_given_z2: nan,
            rate_total: nan,
            psnr: nan,
            elbo: nan,
            is: nan,
            diversity: nan,
            sharpness: nan,
            mi_z2: nan,
            mi_z1: nan,
            acc_logreg_mu2: nan,
            acc_knn_mu2: nan,
            acc_logreg_mu1: nan,
            acc_knn_mu1: nan,
            bound_z2: nan,
            bound_z1: nan,
            wall_ms: 0,
            status: status.to_string(),
        }
    }

    /// Fills the metric columns. `upper_rates` counts how many top-first
    /// layer rates belong to the upper bin; probes for `layers[0]` and
    /// `layers[1]` feed the z2 and z1 columns.
    #[allow(clippy::too_many_arguments)]
    pub fn from_metrics(
        grid_i: usize,
        grid_j: usize,
        beta_2: f64,
        beta_1: f64,
        seed: u64,
        steps: usize,
        metrics: &RunMetrics,
        upper_rates: usize,
        layers: [usize; 2],
    ) -> Self {
        let mut r = Self::failed(grid_i, grid_j, beta_2, beta_1, seed, steps, "ok");
        r.distortion = metrics.distortion;
        r.rate_z2 = metrics.rates[..upper_rates].iter().sum();
        r.rate_z1_given_z2 = metrics.rates[upper_rates..].iter().sum();
        r.rate_total = metrics.total_rate;
        r.psnr = metrics.psnr;
        r.elbo = metrics.elbo;
        r.is = metrics.is;
        r.diversity = metrics.diversity;
        r.sharpness = metrics.sharpness;
        if let Some(p) = metrics.probe(layers[0]) {
            r.mi_z2 = p.mi;
            r.acc_logreg_mu2 = p.acc_logreg;
            r.acc_knn_mu2 = p.acc_knn;
            r.bound_z2 = p.bound;
        }
        if let Some(p) = metrics.probe(layers[1]) {
            r.mi_z1 = p.mi;
            r.acc_logreg_mu1 = p.acc_logreg;
            r.acc_knn_mu1 = p.acc_knn;
            r.bound_z1 = p.bound;
        }
        r
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Value of a real-valued column by name.
    pub fn metric(&self, column: &str) -> Option<f64> {
        Some(match column {
            "beta_2" => self.beta_2,
            "beta_1" => self.beta_1,
            "D" => self.distortion,
            "R_z2" => self.rate_z2,
            "R_z1_given_z2" => self.rate_z1_given_z2,
            "R_total" => self.rate_total,
            "psnr" => self.psnr,
            "elbo" => self.elbo,
            "is" => self.is,
            "diversity" => self.diversity,
            "sharpness" => self.sharpness,
            "mi_z2" => self.mi_z2,
            "mi_z1" => self.mi_z1,
            "acc_logreg_mu2" => self.acc_logreg_mu2,
            "acc_knn_mu2" => self.acc_knn_mu2,
            "acc_logreg_mu1" => self.acc_logreg_mu1,
            "acc_knn_mu1" => self.acc_knn_mu1,
            "bound_z2" => self.bound_z2,
            "bound_z1" => self.bound_z1,
            "wall_ms" => self.wall_ms as f64,
            _ => return None,
        })
    }

    /// Best probe accuracy over both classifiers and both bins.
    pub fn best_accuracy(&self) -> f64 {
        [self.acc_logreg_mu2, self.acc_knn_mu2, self.acc_logreg_mu1, self.acc_knn_mu1]
            .into_iter()
            .filter(|a| !a.is_nan())
            .fold(f64::NAN, f64::max)
    }

    fn fields(&self) -> Vec<String> {
        let mut out = vec![
            self.grid_i.to_string(),
            self.grid_j.to_string(),
            fmt_f64(self.beta_2),
            fmt_f64(self.beta_1),
            self.seed.to_string(),
            self.steps.to_string(),
        ];
        out.extend(METRIC_COLUMNS.iter().map(|c| fmt_f64(self.metric(c).expect("known column"))));
        out.push(self.wall_ms.to_string());
        out.push(self.status.clone());
        out
    }
}

/// Shortest round-trip decimal, with `nan`, `inf` and `-inf` spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

/// Writes `# key=value` metadata lines, the header, then the records.
pub fn write_runs<W: Write>(mut out: W, metadata: &[(String, String)], records: &[RunRecord]) -> Result<()> {
    writeln!(out, "# hitlab runs format_version={RUNS_FORMAT_VERSION}")?;
    for (k, v) in metadata {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_COLUMNS)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `runs.csv`, checking the format version and the column list.
pub fn read_runs<R: Read>(input: R) -> Result<(Vec<(String, String)>, Vec<RunRecord>)> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let mut metadata = Vec::new();
    let mut version = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        if let Some(v) = body.strip_prefix("hitlab runs format_version=") {
            version = v.trim().parse::<u32>().ok();
        } else if let Some((k, v)) = body.split_once('=') {
            metadata.push((k.to_string(), v.to_string()));
        }
    }
    match version {
        Some(RUNS_FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "runs format_version {v}, expected {RUNS_FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Format("runs file lacks a format_version comment".into())),
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != RUN_COLUMNS {
        return Err(Error::Format(format!("unexpected runs columns {header:?}")));
    }
    let mut records = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |col: &str| Error::Format(format!("row {}: bad {col} value", line + 1));
        let int = |k: usize| rec[k].trim().parse::<u64>().map_err(|_| bad(RUN_COLUMNS[k]));
        let real = |k: usize| parse_f64(&rec[k]).ok_or_else(|| bad(RUN_COLUMNS[k]));
        records.push(RunRecord {
            grid_i: int(0)? as usize,
            grid_j: int(1)? as usize,
            beta_2: real(2)?,
            beta_1: real(3)?,
            seed: int(4)?,
            steps: int(5)? as usize,
            distortion: real(6)?,
            rate_z2: real(7)?,
            rate_z1_given_z2: real(8)?,
            rate_total: real(9)?,
            psnr: real(10)?,
            elbo: real(11)?,
            is: real(12)?,
            diversity: real(13)?,
            sharpness: real(14)?,
            mi_z2: real(15)?,
            mi_z1: real(16)?,
            acc_logreg_mu2: real(17)?,
            acc_knn_mu2: real(18)?,
            acc_logreg_mu1: real(19)?,
            acc_knn_mu1: real(20)?,
            bound_z2: real(21)?,
            bound_z1: real(22)?,
            wall_ms: int(23)?,
            status: rec[24].to_string(),
        });
    }
    Ok((metadata, records))
}
