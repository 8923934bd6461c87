use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{gen_binary_bars, gen_gaussian, gen_labeled_mixture, Dataset};
use crate::distributions::splitmix64;
use crate::error::{Error, Result};
use crate::hvae::{BetaVector, HvaeConfig};
use crate::metrics::EvalOptions;
use crate::training::TrainSpec;

/// Where the training and evaluation samples come from. Generated sets use
/// `seed` for training and `splitmix64(seed ^ 1)` for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Gaussian {
        variances: Vec<f64>,
        train: usize,
        eval: usize,
        seed: u64,
    },
    Mixture {
        classes: usize,
        dim: usize,
        separation: f64,
        train: usize,
        eval: usize,
        seed: u64,
    },
    Bars {
        grid: usize,
        train: usize,
        eval: usize,
        seed: u64,
    },
    Csv {
        train_path: PathBuf,
        eval_path: PathBuf,
    },
}

impl DatasetSpec {
    /// `(train, eval)` datasets.
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        let eval_seed = |s: u64| splitmix64(s ^ 1);
        Ok(match self {
            DatasetSpec::Gaussian {
                variances,
                train,
                eval,
                seed,
            } => (
                gen_gaussian(variances, *train, *seed)?,
                gen_gaussian(variances, *eval, eval_seed(*seed))?,
            ),
            DatasetSpec::Mixture {
                classes,
                dim,
                separation,
                train,
                eval,
                seed,
            } => (
                gen_labeled_mixture(*classes, *dim, *separation, *train, *seed)?,
                gen_labeled_mixture(*classes, *dim, *separation, *eval, eval_seed(*seed))?,
            ),
            DatasetSpec::Bars {
                grid,
                train,
                eval,
                seed,
            } => (
                gen_binary_bars(*grid, *train, *seed)?,
                gen_binary_bars(*grid, *eval, eval_seed(*seed))?,
            ),
            DatasetSpec::Csv { train_path, eval_path } => {
                (Dataset::load_csv(train_path)?, Dataset::load_csv(eval_path)?)
            }
        })
    }
}

/// Values of one grid axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default = "default_true")]
    pub log: bool,
}

fn default_true() -> bool {
    true
}

impl GridAxis {
    pub fn log(min: f64, max: f64, count: usize) -> Self {
        Self {
            min,
            max,
            count,
            log: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min.is_finite() && self.max.is_finite()) {
            return Err(Error::Config(format!("grid minimum {} must be positive", self.min)));
        }
        if self.max < self.min {
            return Err(Error::Config(format!("grid maximum {} below minimum {}", self.max, self.min)));
        }
        if self.count == 0 {
            return Err(Error::Config("grid count must be at least 1".into()));
        }
        Ok(())
    }

    /// Value at index `i`: `min * (max/min)^(i/(count-1))` on a log axis,
    /// evenly spaced otherwise. The endpoints are exactly `min` and `max`.
    pub fn value(&self, i: usize) -> f64 {
        if i == 0 || self.count == 1 {
            return self.min;
        }
        if i == self.count - 1 {
            return self.max;
        }
        let t = i as f64 / (self.count - 1) as f64;
        if self.log {
            self.min * (self.max / self.min).powf(t)
        } else {
            self.min + t * (self.max - self.min)
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

/// The two β axes: `beta_2` weights the upper layer bin, `beta_1` the lower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub beta_2: GridAxis,
    pub beta_1: GridAxis,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            beta_2: GridAxis::log(0.1, 10.0, 5),
            beta_1: GridAxis::log(0.1, 10.0, 5),
        }
    }
}

/// Everything needed to reproduce a sweep or a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dataset: DatasetSpec,
    pub model: HvaeConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub grid: Grid,
    /// Two top-first layer bins `[upper, lower]` partitioning `1..=L` into
    /// contiguous runs. Defaults to `[[L, ..., 2], [1]]`.
    #[serde(default)]
    pub bins: Option<Vec<Vec<usize>>>,
    /// Global seed; cell `c` trains with `splitmix64(seed ^ c)`.
    #[serde(default)]
    pub seed: u64,
    /// Concurrent training runs; `None` uses all available cores.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Write measured times into the `wall_ms` column of `runs.csv`. Off by
    /// default so that repeated sweeps produce identical files; timings
    /// always go to `timings.csv`.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("hitlab-out")
}

impl SweepConfig {
    /// Desk-scale default: 4-class mixture in 8 dimensions, 2 latent layers.
    pub fn desk_default() -> Self {
        let mut model = HvaeConfig::new(8, vec![2, 4]);
        model.hidden = vec![32];
        Self {
            dataset: DatasetSpec::Mixture {
                classes: 4,
                dim: 8,
                separation: 3.0,
                train: 4000,
                eval: 1000,
                seed: 1,
            },
            model,
            train: TrainSpec::default(),
            eval: EvalOptions::default(),
            grid: Grid::default(),
            bins: None,
            seed: 0,
            jobs: None,
            out: default_out(),
            record_wall_time: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: SweepConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.grid.beta_2.validate()?;
        self.grid.beta_1.validate()?;
        self.bins()?;
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.eval.knn_k == 0 {
            return Err(Error::Config("eval.knn_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Upper and lower layer bins, top-first.
    pub fn bins(&self) -> Result<[Vec<usize>; 2]> {
        let big_l = self.model.layers();
        let bins = match &self.bins {
            None => [(2..=big_l).rev().collect(), vec![1]],
            Some(b) => {
                if b.len() != 2 {
                    return Err(Error::Config(format!("expected 2 layer bins, got {}", b.len())));
                }
                [b[0].clone(), b[1].clone()]
            }
        };
        let flat: Vec<usize> = bins.iter().flatten().copied().collect();
        let expect: Vec<usize> = (1..=big_l).rev().collect();
        if bins.iter().any(Vec::is_empty) || flat != expect {
            return Err(Error::Config(format!(
                "bins {bins:?} must split [{big_l}, ..., 1] into two nonempty top-first runs"
            )));
        }
        Ok(bins)
    }

    /// Per-layer β-vector for bin weights `(beta_2, beta_1)`.
    pub fn betas_for(&self, beta_2: f64, beta_1: f64) -> Result<BetaVector> {
        let [upper, _] = self.bins()?;
        let top_first = (1..=self.model.layers())
            .rev()
            .map(|l| if upper.contains(&l) { beta_2 } else { beta_1 })
            .collect();
        BetaVector::new(top_first)
    }

    /// Layers whose modes and posteriors stand for the two bins: the lowest
    /// layer of the upper bin, and layer 1.
    pub fn probe_layers(&self) -> Result<[usize; 2]> {
        let [upper, _] = self.bins()?;
        Ok([*upper.last().expect("nonempty"), 1])
    }
}

/// Applies `path=value` overrides to a JSON config. `path` is dot-separated
/// (`train.steps`); `value` is parsed as JSON, falling back to a string.
pub fn apply_overrides(mut config: Value, overrides: &[String]) -> Result<Value> {
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} is not path=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut config, path, value)?;
    }
    Ok(config)
}

/// Sets a dot-separated path, creating intermediate objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for key in &keys[..keys.len() - 1] {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => map.entry(key.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("{path:?}: {key:?} indexes an array")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{path:?}: index {idx} out of range")))?
            }
            _ => return Err(Error::Config(format!("{path:?}: {key:?} is not an object"))),
        };
    }
    let last = keys[keys.len() - 1];
    if cur.is_null() {
        *cur = Value::Object(Default::default());
    }
    match cur {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
        }
        Value::Array(items) => {
            let idx: usize = last
                .parse()
                .map_err(|_| Error::Config(format!("{path:?}: {last:?} indexes an array")))?;
            *items
                .get_mut(idx)
                .ok_or_else(|| Error::Config(format!("{path:?}: index {idx} out of range")))? = value;
        }
        _ => return Err(Error::Config(format!("{path:?}: parent is not an object"))),
    }
    Ok(())
}
