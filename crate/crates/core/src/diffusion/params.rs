//! Named parameter registry with addressable subsets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameter groups that can be trained while the rest stays frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    /// Every cross-attention key and value projection, nothing else.
    KvCrossAttention,
    All,
    /// Denoiser layers outside attention blocks; excludes the text embedding.
    NonAttention,
    EmbeddingOnly,
    None,
}

impl ParamSubset {
    pub fn contains(self, name: &str) -> bool {
        match self {
            ParamSubset::KvCrossAttention => is_kv(name),
            ParamSubset::All => true,
            ParamSubset::NonAttention => !name.contains(".attn.") && !is_text(name),
            ParamSubset::EmbeddingOnly => is_text(name),
            ParamSubset::None => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamSubset::KvCrossAttention => "kv_cross_attention",
            ParamSubset::All => "all",
            ParamSubset::NonAttention => "non_attention",
            ParamSubset::EmbeddingOnly => "embedding_only",
            ParamSubset::None => "none",
        }
    }
}

impl fmt::Display for ParamSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kv_cross_attention" | "kv" => ParamSubset::KvCrossAttention,
            "all" => ParamSubset::All,
            "non_attention" => ParamSubset::NonAttention,
            "embedding_only" => ParamSubset::EmbeddingOnly,
            "none" => ParamSubset::None,
            other => return Err(Error::Config(format!("unknown parameter subset '{other}'"))),
        })
    }
}

fn is_kv(name: &str) -> bool {
    name.ends_with(".attn.to_k") || name.ends_with(".attn.to_v")
}

fn is_text(name: &str) -> bool {
    name.starts_with("text.")
}

/// Ordered map from stable parameter names to tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Real> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Params<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn select(&self, subset: ParamSubset) -> Vec<String> {
        self.names().filter(|n| subset.contains(n)).map(str::to_owned).collect()
    }

    /// Total scalar count of the parameters in `subset`.
    pub fn count(&self, subset: ParamSubset) -> usize {
        self.iter().filter(|(n, _)| subset.contains(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Real>(&self) -> Params<T> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter in `g`; names accepted by `tracked` become
    /// tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<S>, tracked: impl Fn(&str) -> bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            let v = if tracked(name) { g.var(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    /// Names whose tensors differ bytewise (or are missing) between `self`
    /// and `other`.
    pub fn changed_names(&self, other: &Params<S>) -> Vec<String> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            match other.get(name) {
                Some(o) if bytes_equal(t, o) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.names() {
            if !self.contains(name) {
                out.push(name.to_owned());
            }
        }
        out
    }
}

fn bytes_equal<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> bool {
    a.dims() == b.dims()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Graph handles for a bound parameter set.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Points `name` at another graph node, e.g. a probe input.
    pub fn rebind(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Error::Config(format!("parameter '{name}' not bound"))),
        }
    }

    /// Bound vars whose names satisfy `pred`, in name order.
    pub fn filter(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(n, &v)| (n.clone(), v))
            .collect()
    }
}
