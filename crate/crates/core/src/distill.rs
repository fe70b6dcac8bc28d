//! Self-distilled auxiliary dataset: the fine-tuned model's own greedy
//! outputs on the training prompts, used as labels.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PromptTargetPair;
use crate::model::{ModelError, ModelState};
use crate::vocab::{TokenId, TokenSeq, EOS};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("pair {0} has an empty generation")]
    EmptyLabel(String),
    #[error("every self-distilled pair is empty")]
    Dataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdPair {
    pub source_pair_id: String,
    pub x: TokenSeq,
    /// Generated tokens followed by EOS.
    pub y_hat: TokenSeq,
    pub empty: bool,
}

#[derive(Serialize, Deserialize)]
struct SdRecord {
    source_pair_id: String,
    x_tokens: Vec<TokenId>,
    y_hat_tokens: Vec<TokenId>,
    empty_flag: bool,
}

/// One greedy generation per training pair, in input order.
pub fn build_sd_dataset(
    model: &ModelState,
    train: &[PromptTargetPair],
    max_gen_len: usize,
) -> Result<Vec<SdPair>> {
    train
        .par_iter()
        .map(|p| {
            let g = model.generate(&p.x, max_gen_len)?;
            let empty = g.is_empty();
            let mut ids = g.ids;
            ids.push(EOS);
            Ok(SdPair {
                source_pair_id: p.pair_id.clone(),
                x: p.x.clone(),
                y_hat: TokenSeq::label(ids),
                empty,
            })
        })
        .collect()
}

/// Summed token NLL of the self-generated label.
pub fn sd_loss(model: &ModelState, pair: &SdPair) -> Result<f64> {
    if pair.empty {
        return Err(DistillError::EmptyLabel(pair.source_pair_id.clone()));
    }
    Ok(model.nll_loss(&pair.x, &pair.y_hat)?)
}

/// Mean `sd_loss` over the non-empty pairs and the number skipped.
pub fn mean_sd_loss(model: &ModelState, pairs: &[SdPair]) -> Result<(f64, usize)> {
    let usable: Vec<&SdPair> = pairs.iter().filter(|p| !p.empty).collect();
    if usable.is_empty() {
        return Err(DistillError::Dataset);
    }
    let losses = usable
        .par_iter()
        .map(|p| sd_loss(model, p))
        .collect::<Result<Vec<f64>>>()?;
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, pairs.len() - usable.len()))
}

/// Mean `nll_loss` over real pairs.
pub fn mean_real_loss(model: &ModelState, pairs: &[PromptTargetPair]) -> Result<f64> {
    let losses = pairs
        .par_iter()
        .map(|p| model.nll_loss(&p.x, &p.y))
        .collect::<std::result::Result<Vec<f64>, ModelError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

pub fn write_jsonl(path: &Path, pairs: &[SdPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let rec = SdRecord {
            source_pair_id: p.source_pair_id.clone(),
            x_tokens: p.x.ids.clone(),
            y_hat_tokens: p.y_hat.ids.clone(),
            empty_flag: p.empty,
        };
        serde_json::to_writer(&mut f, &rec).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SdPair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SdRecord = serde_json::from_str(&line).map_err(|e| DistillError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(SdPair {
            source_pair_id: rec.source_pair_id,
            x: TokenSeq::prompt(rec.x_tokens),
            y_hat: TokenSeq::label(rec.y_hat_tokens),
            empty: rec.empty_flag,
        });
    }
    Ok(out)
}
