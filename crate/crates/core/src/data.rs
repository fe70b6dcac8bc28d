//! Interaction data: ingest, synthesis, k-core filtering, chronological
//! splitting and prompt/target materialization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vocab::{TokenId, TokenSeq, Vocab, BOS, EOS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Ingest { line: usize, msg: String },
    #[error("filtering with k={k} left no interactions")]
    Filter { k: usize },
    #[error("split: {0}")]
    Split(String),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub category: String,
}

/// Items keyed by id, kept in id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ItemCatalog {
    items: BTreeMap<String, Item>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: impl IntoIterator<Item = Item>) -> Self {
        Self {
            items: items.into_iter().map(|i| (i.item_id.clone(), i)).collect(),
        }
    }

    pub fn insert(&mut self, item: Item) {
        self.items.insert(item.item_id.clone(), item);
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    pub fn max_title_tokens(&self, vocab: &Vocab) -> usize {
        self.iter().map(|i| vocab.encode(&i.title).len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: String,
    pub timestamp: i64,
}

/// One user's interactions, sorted by timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interactions {
    pub catalog: ItemCatalog,
    pub sequences: Vec<InteractionSequence>,
}

impl Interactions {
    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Tsv,
    Jsonl,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" => Some(Self::Tsv),
            "jsonl" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    user_id: String,
    item_id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    category: String,
    timestamp: i64,
}

const TSV_COLUMNS: [&str; 5] = ["user_id", "item_id", "title", "category", "timestamp"];

fn parse_tsv_row(line: &str, cols: &[usize; 5], lineno: usize) -> Result<Row> {
    let fields: Vec<&str> = line.split('\t').collect();
    let width = cols.iter().max().unwrap() + 1;
    if fields.len() < width {
        return Err(DataError::Ingest {
            line: lineno,
            msg: format!("expected {width} tab-separated fields, found {}", fields.len()),
        });
    }
    let f = |i: usize| fields[cols[i]].trim().to_string();
    let timestamp = f(4).parse::<i64>().map_err(|e| DataError::Ingest {
        line: lineno,
        msg: format!("bad timestamp {:?}: {e}", f(4)),
    })?;
    Ok(Row {
        user_id: f(0),
        item_id: f(1),
        title: f(2),
        category: f(3),
        timestamp,
    })
}

/// Read events from a TSV (header required) or JSONL file.
///
/// Title and category may be left blank on rows whose item is described on
/// another row. Conflicting descriptions, or an item never described, are
/// ingest errors.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<Interactions> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<(usize, Row)> = Vec::new();
    let mut lines = reader.lines().enumerate();
    let mut tsv_cols = None;
    if format == InputFormat::Tsv {
        let (_, header) = lines.next().ok_or(DataError::Ingest {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header = header?;
        let names: Vec<&str> = header.split('\t').map(str::trim).collect();
        let mut cols = [0usize; 5];
        for (slot, want) in TSV_COLUMNS.iter().enumerate() {
            cols[slot] = names.iter().position(|n| n == want).ok_or_else(|| DataError::Ingest {
                line: 1,
                msg: format!("header lacks column {want}"),
            })?;
        }
        tsv_cols = Some(cols);
    }
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = match &tsv_cols {
            Some(cols) => parse_tsv_row(&line, cols, lineno)?,
            None => serde_json::from_str::<Row>(&line).map_err(|e| DataError::Ingest {
                line: lineno,
                msg: e.to_string(),
            })?,
        };
        if row.user_id.is_empty() || row.item_id.is_empty() {
            return Err(DataError::Ingest {
                line: lineno,
                msg: "empty user_id or item_id".into(),
            });
        }
        rows.push((lineno, row));
    }

    let mut catalog = ItemCatalog::new();
    for (lineno, r) in &rows {
        if r.title.is_empty() && r.category.is_empty() {
            continue;
        }
        if r.title.is_empty() || r.category.is_empty() {
            return Err(DataError::Ingest {
                line: *lineno,
                msg: format!("item {} needs both title and category", r.item_id),
            });
        }
        let item = Item {
            item_id: r.item_id.clone(),
            title: r.title.clone(),
            category: r.category.clone(),
        };
        match catalog.get(&r.item_id) {
            Some(existing) if *existing != item => {
                return Err(DataError::Ingest {
                    line: *lineno,
                    msg: format!("conflicting description for item {}", r.item_id),
                })
            }
            Some(_) => {}
            None => catalog.insert(item),
        }
    }

    let mut by_user: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for (lineno, r) in rows {
        if !catalog.contains(&r.item_id) {
            return Err(DataError::Ingest {
                line: lineno,
                msg: format!("item {} has no title/category anywhere in the file", r.item_id),
            });
        }
        by_user.entry(r.user_id).or_default().push(Event {
            item_id: r.item_id,
            timestamp: r.timestamp,
        });
    }
    let sequences = by_user
        .into_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            InteractionSequence { user_id, events }
        })
        .collect();
    Ok(Interactions { catalog, sequences })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterStats {
    /// Passes that removed at least one interaction.
    pub passes: usize,
    pub removed_events: usize,
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// nothing changes.
pub fn filter_min_interactions(data: &Interactions, k: usize) -> Result<(Interactions, FilterStats)> {
    let mut seqs = data.sequences.clone();
    let total = data.n_events();
    let mut passes = 0;
    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for s in &seqs {
            for e in &s.events {
                *item_counts.entry(e.item_id.as_str()).or_default() += 1;
            }
        }
        let drop_items: HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < k)
            .map(|(i, _)| i.to_string())
            .collect();
        let before: usize = seqs.iter().map(|s| s.events.len()).sum();
        let next: Vec<InteractionSequence> = seqs
            .iter()
            .filter(|s| s.events.len() >= k)
            .map(|s| InteractionSequence {
                user_id: s.user_id.clone(),
                events: s
                    .events
                    .iter()
                    .filter(|e| !drop_items.contains(&e.item_id))
                    .cloned()
                    .collect(),
            })
            .filter(|s| !s.events.is_empty())
            .collect();
        let after: usize = next.iter().map(|s| s.events.len()).sum();
        seqs = next;
        if after == before {
            break;
        }
        passes += 1;
    }
    if seqs.is_empty() {
        return Err(DataError::Filter { k });
    }
    let used: HashSet<&str> = seqs
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.item_id.as_str()))
        .collect();
    let catalog = ItemCatalog::from_items(data.catalog.iter().filter(|i| used.contains(i.item_id.as_str())).cloned());
    let kept: usize = seqs.iter().map(|s| s.events.len()).sum();
    Ok((
        Interactions {
            catalog,
            sequences: seqs,
        },
        FilterStats {
            passes,
            removed_events: total - kept,
        },
    ))
}

/// Prompt layout with `{instruction}` and `{history}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_instruction")]
    pub instruction: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default = "default_history_window")]
    pub history_window: usize,
}

fn default_template() -> String {
    "{instruction} history : {history} answer :".into()
}
fn default_instruction() -> String {
    "given the items this user interacted with recommend the next item".into()
}
fn default_separator() -> String {
    ";".into()
}
fn default_history_window() -> usize {
    10
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            template: default_template(),
            instruction: default_instruction(),
            separator: default_separator(),
            history_window: default_history_window(),
        }
    }
}

impl PromptTemplate {
    /// Text fragments that end up in prompts besides titles.
    pub fn fixed_text(&self) -> String {
        format!(
            "{} {} {}",
            self.template.replace("{instruction}", " ").replace("{history}", " "),
            self.instruction,
            self.separator
        )
    }

    fn render_text(&self, titles: &[&str]) -> String {
        let sep = format!(" {} ", self.separator);
        self.template
            .replace("{instruction}", &self.instruction)
            .replace("{history}", &titles.join(&sep))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: TokenSeq,
    /// Set when the history had to be shortened below the window to fit.
    pub truncated: bool,
}

/// Render the most recent `history_window` items into a BOS-prefixed prompt
/// of at most `max_tokens` tokens.
pub fn render_prompt(
    history: &[&Item],
    template: &PromptTemplate,
    vocab: &Vocab,
    max_tokens: usize,
) -> Result<RenderedPrompt> {
    if history.is_empty() {
        return Err(DataError::Split("prompt needs a nonempty history".into()));
    }
    let window = template.history_window.max(1);
    let mut start = history.len().saturating_sub(window);
    let mut truncated = false;
    loop {
        let titles: Vec<&str> = history[start..].iter().map(|i| i.title.as_str()).collect();
        let mut ids: Vec<TokenId> = vec![BOS];
        ids.extend(vocab.encode(&template.render_text(&titles)));
        if ids.len() <= max_tokens {
            return Ok(RenderedPrompt {
                tokens: TokenSeq::prompt(ids),
                truncated,
            });
        }
        truncated = true;
        if start + 1 < history.len() {
            start += 1;
        } else {
            // Keep BOS and the tail, which carries the answer cue.
            let tail = ids.len() - (max_tokens - 1);
            let mut cut = vec![BOS];
            cut.extend_from_slice(&ids[tail + 1..]);
            cut.truncate(max_tokens);
            return Ok(RenderedPrompt {
                tokens: TokenSeq::prompt(cut),
                truncated,
            });
        }
    }
}

/// Title tokens followed by EOS.
pub fn label_tokens(item: &Item, vocab: &Vocab) -> TokenSeq {
    let mut ids = vocab.encode(&item.title);
    ids.push(EOS);
    TokenSeq::label(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTargetPair {
    /// `{user_id}#{event_index}`
    pub pair_id: String,
    pub user_id: String,
    pub x: TokenSeq,
    pub y: TokenSeq,
    pub target_item_id: String,
    pub target_category: String,
    pub target_timestamp: i64,
    /// Every item the user interacted with before the target.
    pub history_item_ids: Vec<String>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 8.0,
            valid: 1.0,
            test: 1.0,
        }
    }
}

/// Optional per-split caps, sampled uniformly over target events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SampleCaps {
    pub train: Option<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub catalog: ItemCatalog,
    pub vocab: Vocab,
    pub train: Vec<PromptTargetPair>,
    pub valid: Vec<PromptTargetPair>,
    pub test: Vec<PromptTargetPair>,
    /// Longest title in tokens plus two.
    pub max_gen_len: usize,
}

impl SplitDataset {
    /// Stable content hash of the catalog, vocabulary and all pairs.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("dataset serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self).map_err(std::io::Error::other)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let raw = std::fs::read(path)?;
        serde_json::from_slice(&raw).map_err(std::io::Error::other)
    }
}

/// Build the vocabulary covering every title and the prompt template.
pub fn build_vocab(catalog: &ItemCatalog, template: &PromptTemplate) -> Vocab {
    let fixed = template.fixed_text();
    Vocab::build(catalog.iter().map(|i| i.title.as_str()).chain(std::iter::once(fixed.as_str())))
}

/// Partition all events by global timestamp order into train/valid/test
/// and materialize one pair per event that has at least one earlier event
/// of the same user.
pub fn split_chronological(
    data: &Interactions,
    ratios: SplitRatios,
    template: &PromptTemplate,
    l_max: usize,
    caps: SampleCaps,
    seed: u64,
) -> Result<SplitDataset> {
    let total = ratios.train + ratios.valid + ratios.test;
    if !(total > 0.0) || ratios.train < 0.0 || ratios.valid < 0.0 || ratios.test < 0.0 {
        return Err(DataError::Split(format!("invalid ratios {ratios:?}")));
    }
    let vocab = build_vocab(&data.catalog, template);
    let max_gen_len = data.catalog.max_title_tokens(&vocab) + 2;
    if max_gen_len + 2 > l_max {
        return Err(DataError::Split(format!(
            "titles of up to {max_gen_len} generated tokens do not fit l_max={l_max}"
        )));
    }
    let max_prompt = l_max - max_gen_len;

    let mut order: Vec<(i64, &str, usize, usize)> = Vec::new();
    for (si, s) in data.sequences.iter().enumerate() {
        for (ei, e) in s.events.iter().enumerate() {
            order.push((e.timestamp, s.user_id.as_str(), ei, si));
        }
    }
    order.sort();
    let n = order.len();
    let n_train = ((n as f64) * ratios.train / total).round() as usize;
    let n_valid = ((n as f64) * ratios.valid / total).round() as usize;
    let n_train = n_train.min(n);
    let n_valid = n_valid.min(n - n_train);

    let mut parts: [Vec<PromptTargetPair>; 3] = Default::default();
    for (rank, &(ts, user, ei, si)) in order.iter().enumerate() {
        if ei == 0 {
            continue;
        }
        let seq = &data.sequences[si];
        let history: Vec<&Item> = seq.events[..ei]
            .iter()
            .map(|e| data.catalog.get(&e.item_id).expect("resolved at ingest"))
            .collect();
        let target = data.catalog.get(&seq.events[ei].item_id).ok_or_else(|| {
            DataError::Split(format!("unknown item {}", seq.events[ei].item_id))
        })?;
        let rendered = render_prompt(&history, template, &vocab, max_prompt)?;
        let pair = PromptTargetPair {
            pair_id: format!("{user}#{ei}"),
            user_id: user.to_string(),
            x: rendered.tokens,
            y: label_tokens(target, &vocab),
            target_item_id: target.item_id.clone(),
            target_category: target.category.clone(),
            target_timestamp: ts,
            history_item_ids: history.iter().map(|i| i.item_id.clone()).collect(),
            truncated: rendered.truncated,
        };
        let part = if rank < n_train {
            0
        } else if rank < n_train + n_valid {
            1
        } else {
            2
        };
        parts[part].push(pair);
    }
    let [train, valid, test] = parts;
    for (name, p) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if p.is_empty() {
            return Err(DataError::Split(format!("{name} split is empty")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SplitDataset {
        catalog: data.catalog.clone(),
        vocab,
        train: sample_pairs(train, caps.train, &mut rng),
        valid: sample_pairs(valid, caps.valid, &mut rng),
        test: sample_pairs(test, caps.test, &mut rng),
        max_gen_len,
    })
}

/// Uniform sample without replacement; the kept pairs stay in their original order.
fn sample_pairs(pairs: Vec<PromptTargetPair>, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<PromptTargetPair> {
    match cap {
        Some(c) if c < pairs.len() => {
            let mut idx = rand::seq::index::sample(rng, pairs.len(), c).into_vec();
            idx.sort_unstable();
            let mut keep = vec![false; pairs.len()];
            idx.into_iter().for_each(|i| keep[i] = true);
            pairs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
        }
        _ => pairs,
    }
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Probability that the next item comes from the user's preferred category.
    pub stickiness: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of item popularity inside a category; 0 is uniform.
    pub popularity_skew: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            n_categories: 5,
            stickiness: 0.8,
            min_len: 12,
            max_len: 24,
            popularity_skew: 1.0,
        }
    }
}

const CATEGORY_WORDS: [&str; 12] = [
    "action", "puzzle", "racing", "sports", "strategy", "horror", "music", "fantasy", "arcade",
    "shooter", "stealth", "survival",
];
const ADJECTIVES: [&str; 10] = [
    "crimson", "silent", "golden", "frozen", "hidden", "electric", "ancient", "wild", "lunar", "iron",
];
const NOUNS: [&str; 10] = [
    "lantern", "kingdom", "voyage", "circuit", "garden", "harbor", "tower", "engine", "river", "legend",
];

fn category_word(c: usize) -> String {
    CATEGORY_WORDS
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("genre{c}"))
}

fn synthetic_title(cat: &str, m: usize) -> String {
    let (a, n) = (ADJECTIVES.len(), NOUNS.len());
    let mut t = format!("{cat} {} {}", ADJECTIVES[m % a], NOUNS[(m / a) % n]);
    if m >= a * n {
        t.push_str(&format!(" mk{}", m / (a * n)));
    }
    t
}

/// Seeded synthetic corpus: users with one latent preferred category, items
/// round-robin over categories, titles `"<category> <adjective> <noun>"`.
/// A user never repeats an item while unseen items remain in the pool drawn from.
pub fn synthesize_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Interactions> {
    if spec.n_categories == 0 || spec.n_items < spec.n_categories {
        return Err(DataError::Spec(format!(
            "need n_items ({}) >= n_categories ({}) > 0",
            spec.n_items, spec.n_categories
        )));
    }
    if !(0.0..=1.0).contains(&spec.stickiness) {
        return Err(DataError::Spec(format!("stickiness {} outside [0,1]", spec.stickiness)));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len || spec.n_users == 0 {
        return Err(DataError::Spec("need 0 < min_len <= max_len and n_users > 0".into()));
    }
    if !(spec.popularity_skew >= 0.0) {
        return Err(DataError::Spec("popularity_skew must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<Item> = (0..spec.n_items)
        .map(|j| {
            let c = j % spec.n_categories;
            let cat = category_word(c);
            Item {
                item_id: format!("i{j:04}"),
                title: synthetic_title(&cat, j / spec.n_categories),
                category: cat,
            }
        })
        .collect();
    let by_cat: Vec<Vec<usize>> = (0..spec.n_categories)
        .map(|c| (0..spec.n_items).filter(|j| j % spec.n_categories == c).collect())
        .collect();
    // Each category ranks its items in its own random order, so popular
    // titles do not share words across categories.
    let cat_weights: Vec<Vec<f64>> = by_cat
        .iter()
        .map(|js| {
            let mut rank: Vec<usize> = (0..js.len()).collect();
            rank.shuffle(&mut rng);
            rank.iter()
                .map(|&r| 1.0 / ((r + 1) as f64).powf(spec.popularity_skew))
                .collect()
        })
        .collect();

    const BASE_TS: i64 = 1_600_000_000;
    let mut sequences = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let pref = rng.gen_range(0..spec.n_categories);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut ts = BASE_TS + rng.gen_range(0..30 * 86_400);
        let mut seen: HashSet<usize> = HashSet::new();
        let mut events = Vec::with_capacity(len);
        for _ in 0..len {
            let sticky = rng.gen::<f64>() < spec.stickiness;
            let (pool, weights): (Vec<usize>, Vec<f64>) = if sticky {
                by_cat[pref].iter().copied().zip(cat_weights[pref].iter().copied()).unzip()
            } else {
                ((0..spec.n_items).collect(), vec![1.0; spec.n_items])
            };
            let fresh: Vec<usize> = (0..pool.len()).filter(|&k| !seen.contains(&pool[k])).collect();
            let choices = if fresh.is_empty() { (0..pool.len()).collect() } else { fresh };
            let w: Vec<f64> = choices.iter().map(|&k| weights[k]).collect();
            let pick = pool[choices[WeightedIndex::new(&w).expect("positive weights").sample(&mut rng)]];
            seen.insert(pick);
            events.push(Event {
                item_id: items[pick].item_id.clone(),
                timestamp: ts,
            });
            ts += rng.gen_range(3_600..3 * 86_400);
        }
        sequences.push(InteractionSequence {
            user_id: format!("u{u:04}"),
            events,
        });
    }
    Ok(Interactions {
        catalog: ItemCatalog::from_items(items),
        sequences,
    })
}

/// Shuffled copy of `0..n` from a seeded generator.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
