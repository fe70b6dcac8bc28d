//! A one-block causal transformer over title tokens.
//!
//! Layout (pre-norm): token + position embedding, single-head causal
//! self-attention, a GELU feed-forward layer, a final layer norm and an
//! output projection (untied by default, or tied to the embedding table).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};
use crate::vocab::{is_reserved, TokenId, TokenSeq, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds the model limit {l_max}")]
    Length { len: usize, l_max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Token { id: TokenId, vocab: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default)]
    pub tied_output: bool,
}

fn default_d_model() -> usize {
    32
}
fn default_d_ff() -> usize {
    64
}
fn default_l_max() -> usize {
    128
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: default_d_model(),
            d_ff: default_d_ff(),
            l_max: default_l_max(),
            tied_output: false,
        }
    }
}

// Parameter slots. `W_OUT` exists only for untied output projections.
const EMB: usize = 0;
const POS: usize = 1;
const LN1_G: usize = 2;
const LN1_B: usize = 3;
const WQ: usize = 4;
const WK: usize = 5;
const WV: usize = 6;
const WO: usize = 7;
const LN2_G: usize = 8;
const LN2_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LNF_G: usize = 14;
const LNF_B: usize = 15;
const B_OUT: usize = 16;
const W_OUT: usize = 17;

pub const PARAM_NAMES: [&str; 18] = [
    "embedding",
    "positional",
    "ln1.gain",
    "ln1.bias",
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
    "ln2.gain",
    "ln2.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ln_final.gain",
    "ln_final.bias",
    "out.bias",
    "out.weight",
];

/// Every learnable parameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Tensor>,
    version: u64,
}

/// Tape handles for one graph's copy of the parameters.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

fn param_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
    let mut s = vec![
        vec![v, d],
        vec![c.l_max, d],
        vec![d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d, f],
        vec![f],
        vec![f, d],
        vec![d],
        vec![d],
        vec![d],
        vec![v],
    ];
    if !c.tied_output {
        s.push(vec![d, v]);
    }
    s
}

impl ModelState {
    /// All parameters zero: every softmax row is uniform.
    pub fn zeros(config: ModelConfig) -> Self {
        let params = param_shapes(&config)
            .into_iter()
            .map(|s| Tensor::zeros(s).with_grad())
            .collect();
        Self {
            config,
            params,
            version: 0,
        }
    }

    /// Seeded random initialization. Embedding rows are unit-variance,
    /// projections scale with `1/sqrt(fan_in)` and layer-norm gains start at one.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(config);
        let d = m.config.d_model as f64;
        let f = m.config.d_ff as f64;
        let std_for = |slot: usize| -> Option<f64> {
            match slot {
                EMB => Some(1.0),
                POS => Some(0.1),
                WQ | WK | WV => Some(1.0 / d.sqrt()),
                WO => Some(0.5 / d.sqrt()),
                W1 => Some(1.0 / d.sqrt()),
                W2 => Some(0.5 / f.sqrt()),
                W_OUT => Some(1.0 / d.sqrt()),
                _ => None,
            }
        };
        for (slot, p) in m.params.iter_mut().enumerate() {
            match slot {
                LN1_G | LN2_G | LNF_G => p.data_mut().iter_mut().for_each(|x| *x = 1.0),
                _ => {
                    if let Some(std) = std_for(slot) {
                        let normal = Normal::new(0.0, std).expect("positive std");
                        p.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                    }
                }
            }
        }
        m
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Monotone counter bumped on every parameter update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(self.params.iter())
    }

    pub fn embedding(&self) -> &Tensor {
        &self.params[EMB]
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor {
        &mut self.params[EMB]
    }

    /// Mutable access by parameter name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = PARAM_NAMES.iter().position(|&n| n == name)?;
        self.params.get_mut(i)
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p)).collect())
    }

    /// Add `weight * grad` from a finished backward pass into the parameters' buffers.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound, weight: f64) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                p.accumulate_grad(g, weight)?;
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.l_max {
            return Err(ModelError::Length {
                len: tokens.len(),
                l_max: self.config.l_max,
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::Contract("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::Token {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Next-token logits for the requested positions only, shape `[rows.len(), V]`.
    ///
    /// Position `p` attends to tokens `0..=p`. Only keys and values need the
    /// full sequence; every other layer runs on the requested rows.
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        b: &Bound,
        tokens: &[TokenId],
        rows: &[usize],
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        if rows.is_empty() || rows.iter().any(|&r| r >= t_len) {
            return Err(ModelError::Contract(format!(
                "requested rows {rows:?} for a sequence of length {t_len}"
            )));
        }
        let p = &b.0;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..t_len).collect();

        let tok = tape.gather(p[EMB], &ids)?;
        let pos = tape.gather(p[POS], &positions)?;
        let x = tape.add(tok, pos)?;
        let h = tape.layer_norm(x, p[LN1_G], p[LN1_B])?;
        let k = tape.matmul(h, p[WK])?;
        let v = tape.matmul(h, p[WV])?;

        let hq = tape.gather(h, rows)?;
        let xq = tape.gather(x, rows)?;
        let q = tape.matmul(hq, p[WQ])?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.config.d_model as f64).sqrt())?;
        let limits: Vec<usize> = rows.iter().map(|&r| r + 1).collect();
        let attn = tape.masked_softmax(scores, &limits)?;
        let ctx = tape.matmul(attn, v)?;
        let o = tape.matmul(ctx, p[WO])?;
        let x2 = tape.add(xq, o)?;

        let h2 = tape.layer_norm(x2, p[LN2_G], p[LN2_B])?;
        let f = tape.matmul(h2, p[W1])?;
        let f = tape.add_row(f, p[B1])?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p[W2])?;
        let f = tape.add_row(f, p[B2])?;
        let x3 = tape.add(x2, f)?;

        let hf = tape.layer_norm(x3, p[LNF_G], p[LNF_B])?;
        let logits = if self.config.tied_output {
            tape.matmul_bt(hf, p[EMB])?
        } else {
            tape.matmul(hf, p[W_OUT])?
        };
        Ok(tape.add_row(logits, p[B_OUT])?)
    }

    /// Per-position next-token logits, shape `[len, V]`.
    pub fn logits(&self, tokens: &TokenSeq) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let out = self.forward_rows(&mut tape, &b, &tokens.ids, &rows)?;
        Ok(tape.tensor(out))
    }

    /// Record the summed token negative log-likelihood of `label` given `prompt`.
    pub fn nll_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prompt: &TokenSeq,
        label: &TokenSeq,
    ) -> Result<Var> {
        if label.is_empty() {
            return Err(ModelError::Contract("empty label".into()));
        }
        if label.ids.last() != Some(&EOS) {
            return Err(ModelError::Contract("label must end with EOS".into()));
        }
        if prompt.is_empty() {
            return Err(ModelError::Contract("empty prompt".into()));
        }
        let mut seq = prompt.ids.clone();
        seq.extend_from_slice(&label.ids[..label.len() - 1]);
        let first = prompt.len() - 1;
        let rows: Vec<usize> = (first..seq.len()).collect();
        let targets: Vec<Option<usize>> = label
            .ids
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        let logits = self.forward_rows(tape, b, &seq, &rows)?;
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    /// `−Σ_k log p(label_k | prompt, label_<k)`.
    pub fn nll_loss(&self, prompt: &TokenSeq, label: &TokenSeq) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let l = self.nll_on_tape(&mut tape, &b, prompt, label)?;
        Ok(tape.value(l)[0])
    }

    /// Greedy decoding. PAD, BOS and UNK are never emitted; ties go to the
    /// smallest id. The returned label excludes the terminating EOS.
    pub fn generate(&self, prompt: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
        if max_len == 0 {
            return Err(ModelError::Contract("max_len must be positive".into()));
        }
        if prompt.len() + max_len > self.config.l_max {
            return Err(ModelError::Length {
                len: prompt.len() + max_len,
                l_max: self.config.l_max,
            });
        }
        let mut seq = prompt.ids.clone();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let row = self.forward_rows(&mut tape, &b, &seq, &[seq.len() - 1])?;
            let next = argmax_allowed(tape.value(row));
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(TokenSeq::label(out))
    }

    /// Mean of the embedding rows of the non-reserved tokens; zero vector if none.
    pub fn embed_sequence(&self, tokens: &TokenSeq) -> Vec<f64> {
        embed_mean(self.embedding(), tokens.content())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CKPT_FORMAT.into(),
            format_version: CKPT_VERSION,
            config: self.config.clone(),
            model_version: self.version,
            params: self
                .named_params()
                .map(|(n, t)| CkptParam {
                    name: n.into(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let s = serde_json::to_string(&ck).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Load a checkpoint; a vocabulary-size mismatch is a hard error.
    pub fn load(path: &Path, expected_vocab: usize) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&raw).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CKPT_FORMAT || ck.format_version != CKPT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.format_version
            )));
        }
        if ck.config.vocab_size != expected_vocab {
            return Err(ModelError::Checkpoint(format!(
                "vocab size mismatch: checkpoint has {}, expected {expected_vocab}",
                ck.config.vocab_size
            )));
        }
        let shapes = param_shapes(&ck.config);
        if shapes.len() != ck.params.len() {
            return Err(ModelError::Checkpoint("parameter count mismatch".into()));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for ((p, shape), name) in ck.params.into_iter().zip(shapes).zip(PARAM_NAMES) {
            if p.name != name || p.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
            params.push(Tensor::new(p.shape, p.values)?.with_grad());
        }
        Ok(Self {
            config: ck.config,
            params,
            version: ck.model_version,
        })
    }
}

pub(crate) fn embed_mean(table: &Tensor, ids: impl Iterator<Item = TokenId>) -> Vec<f64> {
    let d = table.shape()[1];
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for t in ids {
        for (a, &x) in acc.iter_mut().zip(table.row(t as usize)) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

fn argmax_allowed(row: &[f64]) -> TokenId {
    let mut best = EOS;
    let mut best_v = row[EOS as usize];
    for (i, &v) in row.iter().enumerate() {
        let id = i as TokenId;
        if id == PAD || id == BOS || id == UNK {
            continue;
        }
        if v > best_v || (v == best_v && id < best) {
            best = id;
            best_v = v;
        }
    }
    best
}

/// True when `id` may appear inside a generated label.
pub fn is_content(id: TokenId) -> bool {
    !is_reserved(id)
}

const CKPT_FORMAT: &str = "softrec-checkpoint";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    format_version: u32,
    config: ModelConfig,
    model_version: u64,
    params: Vec<CkptParam>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}
