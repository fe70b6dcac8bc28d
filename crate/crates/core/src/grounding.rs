//! Map generated token sequences onto catalog items by squared L2 distance
//! between mean-pooled token embeddings.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use crate::data::ItemCatalog;
use crate::model::{embed_mean, ModelState};
use crate::vocab::{TokenSeq, Vocab};

/// Pooled title embedding of every catalog item, tagged with the model
/// version it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    model_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounded {
    pub ranked: Vec<(String, f64)>,
    /// The query had no content tokens and was matched against the zero vector.
    pub empty_query: bool,
}

pub fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ascending distance, then lexicographic item id.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0))
}

impl ItemEmbeddingIndex {
    pub fn build(model: &ModelState, catalog: &ItemCatalog, vocab: &Vocab) -> Self {
        let mut ids = Vec::with_capacity(catalog.len());
        let mut vectors = Vec::with_capacity(catalog.len());
        for item in catalog.iter() {
            let toks = vocab.encode(&item.title);
            ids.push(item.item_id.clone());
            vectors.push(embed_mean(model.embedding(), toks.into_iter().filter(|&t| crate::model::is_content(t))));
        }
        Self {
            ids,
            vectors,
            model_version: model.version(),
        }
    }

    /// An index over explicit vectors, for fixtures and tooling.
    pub fn from_vectors(entries: Vec<(String, Vec<f64>)>, model_version: u64) -> Self {
        let (ids, vectors) = entries.into_iter().unzip();
        Self {
            ids,
            vectors,
            model_version,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    pub fn is_current(&self, model: &ModelState) -> bool {
        self.model_version == model.version()
    }

    pub fn vector(&self, item_id: &str) -> Option<&[f64]> {
        let i = self.ids.iter().position(|x| x == item_id)?;
        Some(&self.vectors[i])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// All items passing `keep`, ranked against `query`.
    pub fn rank_vector(&self, query: &[f64], keep: impl Fn(&str) -> bool) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .entries()
            .filter(|(id, _)| keep(id))
            .map(|(id, v)| (id.to_string(), squared_l2(query, v)))
            .collect();
        out.sort_by(rank_order);
        out
    }

    /// The `k` nearest items to the pooled embedding of `generated`.
    pub fn ground(&self, model: &ModelState, generated: &TokenSeq, k: usize) -> Grounded {
        let query = model.embed_sequence(generated);
        let empty_query = generated.content().next().is_none();
        let mut ranked = self.rank_vector(&query, |_| true);
        ranked.truncate(k);
        Grounded { ranked, empty_query }
    }

    /// Lossless text dump: version line, then `item_id<TAB>v1 v2 ...`.
    pub fn dump(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# model_version {}", self.model_version)?;
        for (id, v) in self.entries() {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            writeln!(f, "{id}\t{}", vals.join(" "))?;
        }
        f.flush()
    }
}
