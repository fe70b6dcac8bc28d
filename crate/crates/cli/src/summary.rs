//! Seed-level aggregation of persisted test metrics and SOFT gains.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::pipeline::{SEED_DIR_PREFIX, TEST_METRICS_FILE};
use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const GAINS_FILE: &str = "gains.csv";
const SOFT: &str = "soft";
const NON_METRIC: [&str; 5] = ["regime", "alpha", "dataset_fingerprint", "n_examples", "n_empty"];

/// One regime's test metrics for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub regime: String,
    pub fingerprint: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gain {
    pub baseline: String,
    pub metric: String,
    pub soft: f64,
    pub base: f64,
    /// `None` when the baseline mean is zero.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Metric columns in file order.
    pub metrics: Vec<String>,
    /// Regimes in order of first appearance.
    pub regimes: Vec<String>,
    pub rows: Vec<SeedMetrics>,
    pub stats: BTreeMap<String, BTreeMap<String, Stat>>,
    pub gains: Vec<Gain>,
}

/// Seed run directories under `path`, or `path` itself if it is one.
pub fn seed_dirs(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.join(MANIFEST_FILE).exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| CliError::Comparison(format!("{}: {e}", path.display())))?;
    let mut dirs: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let seed = name.strip_prefix(SEED_DIR_PREFIX)?.parse().ok()?;
            e.path().join(MANIFEST_FILE).exists().then(|| (seed, e.path()))
        })
        .collect();
    dirs.sort();
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

fn read_seed(dir: &Path) -> Result<(Vec<String>, Vec<SeedMetrics>), CliError> {
    let cmp = |m: String| CliError::Comparison(format!("{}: {m}", dir.display()));
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| cmp(e.to_string()))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| cmp(e.to_string()))?;
    let mut reader = csv::Reader::from_path(dir.join(TEST_METRICS_FILE)).map_err(|e| cmp(e.to_string()))?;
    let header: Vec<String> = reader.headers().map_err(|e| cmp(e.to_string()))?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| cmp(format!("missing column {name}")));
    let (ri, fi) = (col("regime")?, col("dataset_fingerprint")?);
    let metrics: Vec<String> = header.iter().filter(|h| !NON_METRIC.contains(&h.as_str())).cloned().collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| cmp(e.to_string()))?;
        let mut values = BTreeMap::new();
        for m in &metrics {
            let v: f64 = rec[col(m)?].parse().map_err(|e| cmp(format!("{m}: {e}")))?;
            values.insert(m.clone(), v);
        }
        rows.push(SeedMetrics {
            seed: manifest.seed,
            regime: rec[ri].to_string(),
            fingerprint: rec[fi].to_string(),
            values,
        });
    }
    Ok((metrics, rows))
}

/// Aggregate every seed found under `paths`. With `baseline`, gains are
/// reported against that regime only.
pub fn summarize(paths: &[PathBuf], baseline: Option<&str>) -> Result<Summary, CliError> {
    let mut dirs = Vec::new();
    for p in paths {
        dirs.extend(seed_dirs(p)?);
    }
    let mut metrics: Option<Vec<String>> = None;
    let mut rows: Vec<SeedMetrics> = Vec::new();
    for d in &dirs {
        let (m, r) = read_seed(d)?;
        match &metrics {
            Some(prev) if *prev != m => {
                return Err(CliError::Comparison(format!("{} reports different metrics", d.display())))
            }
            _ => metrics = Some(m),
        }
        rows.extend(r);
    }
    let metrics = metrics.ok_or_else(|| CliError::Comparison("no completed runs found".into()))?;
    if rows.is_empty() {
        return Err(CliError::Comparison("no completed runs found".into()));
    }
    summarize_rows(metrics, rows, baseline)
}

/// Aggregation over in-memory rows; every compared run of a seed must share
/// one dataset fingerprint.
pub fn summarize_rows(metrics: Vec<String>, rows: Vec<SeedMetrics>, baseline: Option<&str>) -> Result<Summary, CliError> {
    let mut fingerprints: BTreeMap<u64, &str> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if let Some(fp) = fingerprints.insert(r.seed, &r.fingerprint) {
            if fp != r.fingerprint {
                return Err(CliError::Comparison(format!(
                    "seed {} was evaluated on different datasets ({fp} vs {})",
                    r.seed, r.fingerprint
                )));
            }
        }
        if !seen.insert((r.seed, r.regime.as_str())) {
            return Err(CliError::Comparison(format!("seed {} has more than one {} run", r.seed, r.regime)));
        }
    }
    let mut regimes: Vec<String> = Vec::new();
    for r in &rows {
        if !regimes.contains(&r.regime) {
            regimes.push(r.regime.clone());
        }
    }
    let mut stats = BTreeMap::new();
    for regime in &regimes {
        let mut per = BTreeMap::new();
        for m in &metrics {
            let xs: Vec<f64> = rows.iter().filter(|r| &r.regime == regime).map(|r| r.values[m]).collect();
            per.insert(m.clone(), Stat::of(&xs));
        }
        stats.insert(regime.clone(), per);
    }
    let mut gains = Vec::new();
    if let Some(soft) = stats.get(SOFT) {
        if let Some(b) = baseline.filter(|b| !stats.contains_key(*b)) {
            return Err(CliError::Comparison(format!("no runs of baseline regime {b}")));
        }
        for regime in regimes.iter().filter(|r| *r != SOFT && baseline.map_or(true, |b| b == r.as_str())) {
            for m in &metrics {
                let (s, b) = (soft[m].mean, stats[regime][m].mean);
                gains.push(Gain {
                    baseline: regime.clone(),
                    metric: m.clone(),
                    soft: s,
                    base: b,
                    gain: (b != 0.0).then(|| (s - b) / b),
                });
            }
        }
    } else {
        log::warn!("no soft runs to compare against");
    }
    Ok(Summary {
        metrics,
        regimes,
        rows,
        stats,
        gains,
    })
}

impl Summary {
    /// Per-seed rows, then `mean` and `std` rows, for each regime.
    pub fn table_csv(&self) -> String {
        let mut out = format!("regime,seed,{}\n", self.metrics.join(","));
        for regime in &self.regimes {
            let mut rows: Vec<&SeedMetrics> = self.rows.iter().filter(|r| &r.regime == regime).collect();
            rows.sort_by_key(|r| r.seed);
            for r in rows {
                let vals: Vec<String> = self.metrics.iter().map(|m| format!("{:?}", r.values[m])).collect();
                let _ = writeln!(out, "{regime},{},{}", r.seed, vals.join(","));
            }
            let st = &self.stats[regime];
            for (tag, f) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("std", |s: &Stat| s.std)] {
                let vals: Vec<String> = self.metrics.iter().map(|m| format!("{:?}", f(&st[m]))).collect();
                let _ = writeln!(out, "{regime},{tag},{}", vals.join(","));
            }
        }
        out
    }

    pub fn gains_csv(&self) -> String {
        let mut out = String::from("baseline,metric,soft,baseline_value,gain,gain_pct\n");
        for g in &self.gains {
            let (gain, pct) = match g.gain {
                Some(x) => (format!("{x:?}"), format!("{:+.2}%", 100.0 * x)),
                None => ("n/a".into(), "n/a".into()),
            };
            let _ = writeln!(out, "{},{},{:?},{:?},{gain},{pct}", g.baseline, g.metric, g.soft, g.base);
        }
        out
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Comparison(e.to_string()))?;
        std::fs::write(out.join(SUMMARY_FILE), self.table_csv()).map_err(|e| CliError::Comparison(e.to_string()))?;
        std::fs::write(out.join(GAINS_FILE), self.gains_csv()).map_err(|e| CliError::Comparison(e.to_string()))
    }

    pub fn gain(&self, baseline: &str, metric: &str) -> Option<&Gain> {
        self.gains.iter().find(|g| g.baseline == baseline && g.metric == metric)
    }

    pub fn mean(&self, regime: &str, metric: &str) -> Option<f64> {
        Some(self.stats.get(regime)?.get(metric)?.mean)
    }
}
