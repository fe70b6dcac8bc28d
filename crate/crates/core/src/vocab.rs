//! Tokenization and the token vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const N_RESERVED: usize = 4;

const RESERVED: [&str; N_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < N_RESERVED
}

/// Lowercase, split on whitespace, and emit every punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Label,
}

/// An ordered list of token ids tagged with its role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub role: Role,
}

impl TokenSeq {
    pub fn prompt(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            role: Role::Prompt,
        }
    }

    pub fn label(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            role: Role::Label,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids with reserved tokens removed.
    pub fn content(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.ids.iter().copied().filter(|&t| !is_reserved(t))
    }

    /// No PAD may precede a non-PAD token.
    pub fn is_well_padded(&self) -> bool {
        let first_pad = self.ids.iter().position(|&t| t == PAD);
        match first_pad {
            Some(p) => self.ids[p..].iter().all(|&t| t == PAD),
            None => true,
        }
    }
}

/// Bijective token ↔ id map. Ids `0..4` are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab {
            tokens: r.tokens,
            index,
        }
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    /// Build from every token occurring in `texts`, in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        VocabRepr { tokens }.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= N_RESERVED
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Join non-reserved tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&t| !is_reserved(t))
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
