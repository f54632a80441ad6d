//! Token vocabulary and prompt contexts built from a learnable embedding table.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::params::{Bound, Params};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const EMBEDDING: &str = "text.embedding";
/// Rows appended by embedding-only fine-tuning.
pub const EXTRA_EMBEDDING: &str = "text.extra";

/// Generic filler words shared by every prompt.
pub const FILLER_TOKENS: [&str; 4] = ["a", "photo", "of", "person"];
/// Rare identifier used to bind a subject during fine-tuning.
pub const SUBJECT_TOKEN: &str = "sks";
/// Colour names used in identity captions.
pub const COLOR_TOKENS: [&str; 8] = ["red", "yellow", "green", "cyan", "blue", "magenta", "grey", "dark"];
/// Glyph names used in identity captions.
pub const SHAPE_TOKENS: [&str; 5] = ["disc", "square", "ring", "bar", "triangle"];
/// Number of per-identity tokens `id0, id1, ...` reserved for pretraining.
pub const IDENTITY_SLOTS: usize = 64;

pub fn identity_token(slot: usize) -> String {
    format!("id{slot}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    base_len: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut tokens: Vec<String> = FILLER_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend([SUBJECT_TOKEN, "in", "front", "pyramid"].map(String::from));
        tokens.extend(COLOR_TOKENS.iter().chain(&SHAPE_TOKENS).map(|s| s.to_string()));
        tokens.extend((0..IDENTITY_SLOTS).map(identity_token));
        let base_len = tokens.len();
        Self { tokens, base_len }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn extra_tokens(&self) -> &[String] {
        &self.tokens[self.base_len..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Adds a new token at the end of the vocabulary.
    pub fn extend(&mut self, token: &str) -> Result<usize> {
        if self.id(token).is_some() {
            return Err(Error::Vocabulary(format!("token '{token}' already present")));
        }
        self.tokens.push(token.to_owned());
        Ok(self.tokens.len() - 1)
    }

    /// Whitespace tokenization; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token '{w}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Vocabulary("prompt must contain at least one token".into()));
        }
        Ok(ids)
    }
}

/// Token ids and the gathered `s x d` context.
#[derive(Debug, Clone)]
pub struct PromptContext<S> {
    pub ids: Vec<usize>,
    pub context: Tensor<S>,
}

/// Gathers the context rows for `ids` inside `g`.
pub fn context_var<S: Real>(g: &mut Graph<S>, bound: &Bound, ids: &[usize]) -> Result<Var> {
    let table = bound.var(EMBEDDING)?;
    let table = match bound.get(EXTRA_EMBEDDING) {
        Some(extra) => g.concat(&[table, extra], 0)?,
        None => table,
    };
    Ok(g.embedding(table, ids)?)
}

/// Tokenizes `text` and gathers its embedding rows.
pub fn encode_prompt<S: Real>(vocab: &Vocabulary, params: &Params<S>, text: &str) -> Result<PromptContext<S>> {
    let ids = vocab.encode(text)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let c = context_var(&mut g, &bound, &ids)?;
    Ok(PromptContext {
        context: g.value(c).clone(),
        ids,
    })
}

/// Appends `token` to the vocabulary with an embedding row equal to the mean
/// of the filler-token rows.
pub fn extend_with_placeholder<S: Real>(vocab: &mut Vocabulary, params: &mut Params<S>, token: &str) -> Result<usize> {
    let table = params.expect(EMBEDDING)?;
    let width = table.dims()[1];
    let mut row = vec![S::zero(); width];
    for f in FILLER_TOKENS {
        let id = vocab
            .id(f)
            .ok_or_else(|| Error::Vocabulary(format!("filler '{f}' missing")))?;
        for (r, &v) in row.iter_mut().zip(&table.data()[id * width..(id + 1) * width]) {
            *r += v;
        }
    }
    let k = S::from_usize(FILLER_TOKENS.len()).unwrap();
    row.iter_mut().for_each(|v| *v = *v / k);
    let id = vocab.extend(token)?;
    let extra = match params.get(EXTRA_EMBEDDING) {
        Some(old) => {
            let mut data = old.data().to_vec();
            data.extend_from_slice(&row);
            Tensor::new(vec![old.dims()[0] + 1, width], data)?
        }
        None => Tensor::new(vec![1, width], row)?,
    };
    match params.get_mut(EXTRA_EMBEDDING) {
        Some(slot) => *slot = extra,
        None => params.insert(EXTRA_EMBEDDING, extra)?,
    }
    Ok(id)
}
