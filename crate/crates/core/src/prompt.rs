//! Text prompts listing candidate object and relation names.
//!
//! Layout: `[CLS] girl. umbrella. [SEP] holding. on. [SEP][PAD][PAD]...`.
//! Every positive name appears. Negatives are drawn uniformly without
//! replacement from the rest of the vocabulary until the prompt holds `m`
//! names. Within each section, names are shuffled with the same seeded
//! generator so their position says nothing about which are positives.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_name, ConceptKind, ConceptSpace};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";

/// Default cap on positive plus negative names.
pub const DEFAULT_M: usize = 80;
/// Default fixed prompt length in tokens, padding included.
pub const DEFAULT_BUDGET: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    /// One token per special marker and per name (name plus trailing dot).
    pub tokens: Vec<String>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub m: usize,
}

impl Prompt {
    /// The prompt as one string; padding is appended without spaces.
    pub fn text(&self) -> String {
        let body: Vec<&str> = self.tokens.iter().map(String::as_str).filter(|t| *t != PAD).collect();
        let pads = self.tokens.len() - body.len();
        let mut s = body.join(" ");
        s.push_str(&PAD.repeat(pads));
        s
    }

    /// Names in the object section, in prompt order.
    pub fn object_names(&self) -> Vec<&str> {
        self.section(0)
    }

    /// Names in the relation section, in prompt order.
    pub fn relation_names(&self) -> Vec<&str> {
        self.section(1)
    }

    fn section(&self, which: usize) -> Vec<&str> {
        self.tokens
            .split(|t| t.as_str() == SEP)
            .nth(which)
            .unwrap_or_default()
            .iter()
            .filter(|t| *t != CLS)
            .map(|t| t.strip_suffix('.').unwrap_or(t))
            .collect()
    }
}

/// Builds a prompt with the default token budget.
pub fn build_prompt(positives: &[&str], cs: &ConceptSpace, m: usize, seed: u64) -> Result<Prompt> {
    build_prompt_with_budget(positives, cs, m, seed, DEFAULT_BUDGET)
}

pub fn build_prompt_with_budget(
    positives: &[&str],
    cs: &ConceptSpace,
    m: usize,
    seed: u64,
    budget: usize,
) -> Result<Prompt> {
    let mut pos: Vec<(String, ConceptKind)> = Vec::new();
    let mut seen = HashSet::new();
    for raw in positives {
        let name = normalize_name(raw);
        let kind = if cs.object(&name).is_some() {
            ConceptKind::Object
        } else if cs.relation(&name).is_some() {
            ConceptKind::Relation
        } else {
            return Err(Error::contract(format!("positive '{name}' is not in the concept space")));
        };
        if seen.insert((name.clone(), kind)) {
            pos.push((name, kind));
        }
    }
    if m < pos.len() {
        return Err(Error::contract(format!("cap m = {m} is below the {} positives", pos.len())));
    }
    if budget < m + 3 {
        return Err(Error::contract(format!("token budget {budget} cannot hold {m} names and 3 markers")));
    }

    let pool: Vec<(String, ConceptKind)> = cs
        .objects()
        .iter()
        .chain(cs.relations())
        .map(|c| (c.name.clone(), c.kind))
        .filter(|k| !seen.contains(k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = (m - pos.len()).min(pool.len());
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), want).into_vec();
    picked.sort_unstable();
    let neg: Vec<(String, ConceptKind)> = picked.into_iter().map(|i| pool[i].clone()).collect();

    let mut section = |kind: ConceptKind| {
        let mut names: Vec<&str> = pos
            .iter()
            .chain(&neg)
            .filter(|(_, k)| *k == kind)
            .map(|(n, _)| n.as_str())
            .collect();
        names.shuffle(&mut rng);
        names.into_iter().map(|n| format!("{n}.")).collect::<Vec<_>>()
    };
    let objects = section(ConceptKind::Object);
    let relations = section(ConceptKind::Relation);

    let mut tokens = Vec::with_capacity(budget);
    tokens.push(CLS.to_string());
    tokens.extend(objects);
    tokens.push(SEP.to_string());
    tokens.extend(relations);
    tokens.push(SEP.to_string());
    tokens.resize(budget, PAD.to_string());

    Ok(Prompt {
        tokens,
        positives: pos.into_iter().map(|(n, _)| n).collect(),
        negatives: neg.into_iter().map(|(n, _)| n).collect(),
        m,
    })
}
