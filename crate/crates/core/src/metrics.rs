//! All-ranking evaluation: HR@K, NDCG@K and category hit ratio.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ItemCatalog, PromptTargetPair};
use crate::grounding::ItemEmbeddingIndex;
use crate::model::{ModelError, ModelState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Where the target landed among the non-interacted candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub pair_id: String,
    pub target_item_id: String,
    /// 1-based rank of the target.
    pub target_rank: usize,
    /// Leading candidates, best first.
    pub top: Vec<String>,
    pub n_candidates: usize,
    pub empty_generation: bool,
}

impl RankedPrediction {
    pub fn top1(&self) -> Option<&str> {
        self.top.first().map(String::as_str)
    }
}

/// Generate from the prompt, ground against every item the user has not
/// interacted with (the target always stays in), and record the target's rank.
pub fn rank_candidates(
    model: &ModelState,
    index: &ItemEmbeddingIndex,
    pair: &PromptTargetPair,
    max_gen_len: usize,
    keep_top: usize,
) -> Result<RankedPrediction> {
    if !index.is_current(model) {
        return Err(EvalError::Contract(format!(
            "index built for model version {}, evaluating version {}",
            index.model_version(),
            model.version()
        )));
    }
    let generated = model.generate(&pair.x, max_gen_len)?;
    let query = model.embed_sequence(&generated);
    let empty_generation = generated.content().next().is_none();
    let history: HashSet<&str> = pair
        .history_item_ids
        .iter()
        .map(String::as_str)
        .filter(|&h| h != pair.target_item_id)
        .collect();
    let ranked = index.rank_vector(&query, |id| !history.contains(id));
    let pos = ranked
        .iter()
        .position(|(id, _)| *id == pair.target_item_id)
        .ok_or_else(|| {
            EvalError::Contract(format!(
                "target {} missing from the candidate set of {}",
                pair.target_item_id, pair.pair_id
            ))
        })?;
    Ok(RankedPrediction {
        pair_id: pair.pair_id.clone(),
        target_item_id: pair.target_item_id.clone(),
        target_rank: pos + 1,
        top: ranked.iter().take(keep_top).map(|(id, _)| id.clone()).collect(),
        n_candidates: ranked.len(),
        empty_generation,
    })
}

/// Fraction of predictions whose target rank is within `k`.
pub fn hit_ratio(preds: &[RankedPrediction], k: usize) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().filter(|p| p.target_rank <= k).count();
    hits as f64 / preds.len() as f64
}

/// Mean of `1/log2(rank+1)` for ranks within `k`, zero otherwise.
pub fn ndcg(preds: &[RankedPrediction], k: usize) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .map(|p| {
            if p.target_rank <= k {
                1.0 / ((p.target_rank + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum();
    total / preds.len() as f64
}

/// Fraction of predictions whose rank-1 item shares the target's category.
pub fn category_hit(preds: &[RankedPrediction], catalog: &ItemCatalog) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let cat = |id: &str| catalog.get(id).map(|i| i.category.as_str());
    let hits = preds
        .iter()
        .filter(|p| match p.top1() {
            Some(top) => cat(top).is_some() && cat(top) == cat(&p.target_item_id),
            None => false,
        })
        .count();
    hits as f64 / preds.len() as f64
}

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hit: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub hc1: f64,
    pub n_examples: usize,
    pub n_empty: usize,
}

impl MetricsReport {
    /// Cutoffs 1, 5 and 20 are always included.
    pub fn compute(preds: &[RankedPrediction], catalog: &ItemCatalog, cutoffs: &[usize]) -> Self {
        let mut ks: Vec<usize> = DEFAULT_CUTOFFS.iter().chain(cutoffs).copied().collect();
        ks.sort_unstable();
        ks.dedup();
        Self {
            hit: ks.iter().map(|&k| (k, hit_ratio(preds, k))).collect(),
            ndcg: ks.iter().map(|&k| (k, ndcg(preds, k))).collect(),
            hc1: category_hit(preds, catalog),
            n_examples: preds.len(),
            n_empty: preds.iter().filter(|p| p.empty_generation).count(),
        }
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.hit.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ng(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `H@K ≤ H@K'` and `NG@K ≤ NG@K'` for `K < K'`, `NG@K ≤ H@K`, `HC@1 ≥ H@1`.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let hs: Vec<_> = self.hit.iter().collect();
        for w in hs.windows(2) {
            if w[0].1 > w[1].1 {
                return Err(format!("H@{} > H@{}", w[0].0, w[1].0));
            }
        }
        let ns: Vec<_> = self.ndcg.iter().collect();
        for w in ns.windows(2) {
            if w[0].1 > w[1].1 {
                return Err(format!("NG@{} > NG@{}", w[0].0, w[1].0));
            }
        }
        for (k, h) in &self.hit {
            if self.ng(*k) > *h + 1e-12 {
                return Err(format!("NG@{k} > H@{k}"));
            }
        }
        if self.hc1 + 1e-12 < self.hr(1) {
            return Err("HC@1 < H@1".into());
        }
        Ok(())
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.hit.keys().map(|k| format!("H@{k}")).collect();
        cols.extend(self.ndcg.keys().map(|k| format!("NG@{k}")));
        cols.extend(["HC@1".into(), "n_examples".into(), "n_empty".into()]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.hit.values().map(|v| format!("{v:?}")).collect();
        cols.extend(self.ndcg.values().map(|v| format!("{v:?}")));
        cols.push(format!("{:?}", self.hc1));
        cols.push(self.n_examples.to_string());
        cols.push(self.n_empty.to_string());
        cols.join(",")
    }

    /// Flat `{"H@5": .., "NG@5": .., "HC@1": .., ...}` JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.hit {
            m.insert(format!("H@{k}"), (*v).into());
        }
        for (k, v) in &self.ndcg {
            m.insert(format!("NG@{k}"), (*v).into());
        }
        m.insert("HC@1".into(), self.hc1.into());
        m.insert("n_examples".into(), self.n_examples.into());
        m.insert("n_empty".into(), self.n_empty.into());
        serde_json::Value::Object(m)
    }

    /// Named metric lookup: `H@K`, `NG@K` or `HC@1`.
    pub fn get(&self, name: &str) -> Option<f64> {
        if name == "HC@1" {
            return Some(self.hc1);
        }
        let (kind, k) = name.split_once('@')?;
        let k: usize = k.parse().ok()?;
        match kind {
            "H" => self.hit.get(&k).copied(),
            "NG" => self.ndcg.get(&k).copied(),
            _ => None,
        }
    }
}

/// Rank every pair (in parallel, output in input order) and aggregate.
pub fn evaluate(
    model: &ModelState,
    pairs: &[PromptTargetPair],
    catalog: &ItemCatalog,
    index: &ItemEmbeddingIndex,
    max_gen_len: usize,
    cutoffs: &[usize],
) -> Result<(Vec<RankedPrediction>, MetricsReport)> {
    let keep = cutoffs.iter().chain(&DEFAULT_CUTOFFS).copied().max().unwrap_or(20);
    let preds = pairs
        .par_iter()
        .map(|p| rank_candidates(model, index, p, max_gen_len, keep))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::compute(&preds, catalog, cutoffs);
    Ok((preds, report))
}

pub fn write_predictions(path: &Path, preds: &[RankedPrediction]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_predictions(path: &Path) -> std::io::Result<Vec<RankedPrediction>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}
