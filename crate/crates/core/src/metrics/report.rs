//! Per-image metric tables, per-method summaries and paired comparisons.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::wilcoxon::wilcoxon_signed_rank;
use crate::density::quantile;
use crate::error::{Error, Result};
use crate::rng;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ncc,
    Mssim,
    Mi,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ncc, Metric::Mssim, Metric::Mi];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ncc => "ncc",
            Metric::Mssim => "mssim",
            Metric::Mi => "mi",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc" => Ok(Metric::Ncc),
            "mssim" => Ok(Metric::Mssim),
            "mi" => Ok(Metric::Mi),
            _ => Err(Error::invalid(format!("unknown metric '{s}'"))),
        }
    }
}

/// One metric value for one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Source-to-target contrast pair, e.g. `t1-flair`.
    pub task: String,
    /// Synthesis model, e.g. `pr` or `rf`.
    pub synth: String,
    /// Normalization method, or the baseline name.
    pub method: String,
    pub subject: String,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub synth: String,
    pub method: String,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    /// Percentile-bootstrap 95% interval of the mean.
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Paired signed-rank comparison of `method` against `baseline` over the
/// subjects both were evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: String,
    pub synth: String,
    pub metric: Metric,
    pub method: String,
    pub baseline: String,
    pub n: usize,
    /// Mean of `method - baseline`.
    pub mean_difference: f64,
    pub statistic: f64,
    pub p_value: f64,
    /// Bonferroni-adjusted p for method-vs-method comparisons; equal to
    /// `p_value` against the baseline.
    pub p_adjusted: f64,
    pub exact: bool,
    /// False when the test could not run (too few nonzero differences); p is
    /// then reported as 1.
    pub tested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub baseline: String,
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<Summary>,
    pub comparisons: Vec<Comparison>,
}

/// Percentile-bootstrap interval `(lo, hi)` of the mean at `level`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::invalid("bootstrap needs values and resamples"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let mut rng = rng::seeded(seed);
    let n = values.len();
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&means, alpha)?, quantile(&means, 1.0 - alpha)?))
}

type GroupKey = (String, String, Metric);

struct Groups {
    /// (task, synth, metric) -> method -> subject -> value, methods in first-seen order.
    map: BTreeMap<GroupKey, Vec<(String, BTreeMap<String, f64>)>>,
}

impl Groups {
    fn new(rows: &[MetricRow]) -> Result<Self> {
        let mut map: BTreeMap<GroupKey, Vec<(String, BTreeMap<String, f64>)>> = BTreeMap::new();
        for r in rows {
            if !r.value.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite {} for {} / {}",
                    r.metric, r.method, r.subject
                )));
            }
            let methods = map.entry((r.task.clone(), r.synth.clone(), r.metric)).or_default();
            let pos = match methods.iter().position(|(m, _)| *m == r.method) {
                Some(p) => p,
                None => {
                    methods.push((r.method.clone(), BTreeMap::new()));
                    methods.len() - 1
                }
            };
            if methods[pos].1.insert(r.subject.clone(), r.value).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate {} row for {} / {} / {}",
                    r.metric, r.task, r.method, r.subject
                )));
            }
        }
        Ok(Groups { map })
    }
}

fn compare(
    key: &GroupKey,
    method: (&str, &BTreeMap<String, f64>),
    baseline: (&str, &BTreeMap<String, f64>),
    correction: f64,
) -> Comparison {
    let (x, y): (Vec<f64>, Vec<f64>) = baseline
        .1
        .iter()
        .filter_map(|(s, b)| method.1.get(s).map(|m| (*b, *m)))
        .unzip();
    let n = x.len();
    let mean_difference = if n > 0 {
        y.iter().zip(&x).map(|(a, b)| a - b).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let (statistic, p_value, exact, tested) = match wilcoxon_signed_rank(&x, &y) {
        Ok(w) => (w.statistic, w.p_value, w.exact, true),
        Err(_) => (0.0, 1.0, false, false),
    };
    Comparison {
        task: key.0.clone(),
        synth: key.1.clone(),
        metric: key.2,
        method: method.0.to_string(),
        baseline: baseline.0.to_string(),
        n,
        mean_difference,
        statistic,
        p_value,
        p_adjusted: (p_value * correction).min(1.0),
        exact,
        tested,
    }
}

impl QualityReport {
    /// Summarizes `rows` per (task, synth, method, metric), tests every
    /// method against `baseline`, and tests all other methods pairwise with
    /// a Bonferroni correction over the pairs of each (task, synth, metric).
    pub fn build(rows: Vec<MetricRow>, baseline: &str, resamples: usize, seed: u64) -> Result<Self> {
        let groups = Groups::new(&rows)?;
        let mut summaries = Vec::new();
        let mut comparisons = Vec::new();
        let mut stream = 0u64;
        for (key, methods) in &groups.map {
            for (method, values) in methods {
                let v: Vec<f64> = values.values().copied().collect();
                let (ci_lo, ci_hi) = bootstrap_mean_ci(&v, resamples, 0.95, seed.wrapping_add(stream))?;
                stream += 1;
                summaries.push(Summary {
                    task: key.0.clone(),
                    synth: key.1.clone(),
                    method: method.clone(),
                    metric: key.2,
                    n: v.len(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    ci_lo,
                    ci_hi,
                });
            }
            let base = methods.iter().find(|(m, _)| m == baseline);
            let others: Vec<_> = methods.iter().filter(|(m, _)| m != baseline).collect();
            if let Some((bname, bvals)) = base {
                for (m, vals) in &others {
                    comparisons.push(compare(key, (m, vals), (bname, bvals), 1.0));
                }
            }
            let pairs = others.len() * others.len().saturating_sub(1) / 2;
            for (i, (a, av)) in others.iter().enumerate() {
                for (b, bv) in &others[i + 1..] {
                    comparisons.push(compare(key, (a, av), (b, bv), pairs as f64));
                }
            }
        }
        Ok(QualityReport {
            baseline: baseline.to_string(),
            rows,
            summaries,
            comparisons,
        })
    }

    pub fn summary(&self, task: &str, synth: &str, method: &str, metric: Metric) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.task == task && s.synth == synth && s.method == method && s.metric == metric)
    }

    pub fn comparison(&self, task: &str, synth: &str, metric: Metric, method: &str, baseline: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| {
            c.task == task && c.synth == synth && c.metric == metric && c.method == method && c.baseline == baseline
        })
    }

    /// Writes `quality.csv`, `summary.csv`, `comparisons.csv`, `bars.csv`
    /// and `quality.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("quality.csv"), &self.rows)?;
        write_csv(&dir.join("summary.csv"), &self.summaries)?;
        write_csv(&dir.join("comparisons.csv"), &self.comparisons)?;
        write_csv(&dir.join("bars.csv"), &self.bars())?;
        let json = dir.join("quality.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    /// Bar-chart data: mean, interval and a significance flag against the
    /// baseline for every summarized cell.
    pub fn bars(&self) -> Vec<Bar> {
        self.summaries
            .iter()
            .map(|s| {
                let vs = self.comparison(&s.task, &s.synth, s.metric, &s.method, &self.baseline);
                Bar {
                    task: s.task.clone(),
                    synth: s.synth.clone(),
                    metric: s.metric,
                    method: s.method.clone(),
                    mean: s.mean,
                    ci_lo: s.ci_lo,
                    ci_hi: s.ci_hi,
                    significant: vs.is_some_and(|c| c.tested && c.p_value < 0.05),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bar {
    pub task: String,
    pub synth: String,
    pub metric: Metric,
    pub method: String,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub significant: bool,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::invalid(format!("csv: {other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A method that is significantly better (adjusted p below `alpha`, higher
/// mean) than every other non-baseline method on every metric of the given
/// task and synthesis model, if there is one.
pub fn consistent_winner(report: &QualityReport, task: &str, synth: &str, alpha: f64) -> Option<String> {
    let methods: Vec<&str> = {
        let mut m: Vec<&str> = Vec::new();
        for s in &report.summaries {
            if s.task == task && s.synth == synth && s.method != report.baseline && !m.contains(&s.method.as_str()) {
                m.push(&s.method);
            }
        }
        m
    };
    let beats = |a: &str, b: &str, metric: Metric| {
        report.comparisons.iter().any(|c| {
            c.task == task
                && c.synth == synth
                && c.metric == metric
                && c.tested
                && c.p_adjusted < alpha
                && ((c.method == a && c.baseline == b && c.mean_difference > 0.0)
                    || (c.method == b && c.baseline == a && c.mean_difference < 0.0))
        })
    };
    methods
        .iter()
        .find(|&&a| {
            methods.len() > 1
                && Metric::ALL
                    .iter()
                    .all(|&metric| methods.iter().filter(|&&b| b != a).all(|&b| beats(a, b, metric)))
        })
        .map(|s| s.to_string())
}
