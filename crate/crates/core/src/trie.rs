//! Prefix tree over catalog identifiers and constrained beam search.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::tokenizer::ItemIdentifier;

/// Supplies next-code log-probabilities for a partial identifier.
pub trait PrefixScorer {
    /// Log-probabilities of every code at level `prefix.len()`.
    fn code_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> PrefixScorer for F {
    fn code_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Node {
    children: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentifierTrie {
    levels: usize,
    nodes: Vec<Node>,
    terminals: BTreeMap<ItemIdentifier, Vec<usize>>,
}

/// A finished decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub identifier: ItemIdentifier,
    pub log_prob: f64,
}

/// Higher score first; equal scores in lexicographic identifier order.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl IdentifierTrie {
    /// `catalog[i]` is the identifier of item `i`.
    pub fn build(catalog: &[ItemIdentifier]) -> Result<Self> {
        let first = catalog.first().ok_or(Error::Empty("catalog"))?;
        let levels = first.len();
        if levels == 0 {
            return Err(Error::data("identifiers must have at least one level"));
        }
        let mut trie = Self { levels, nodes: vec![Node::default()], terminals: BTreeMap::new() };
        for (item, id) in catalog.iter().enumerate() {
            if id.len() != levels {
                return Err(Error::data(alloc::format!("item {item} has {} levels, expected {levels}", id.len())));
            }
            let mut at = 0;
            for &c in id.tokens() {
                let next = trie.nodes.len();
                at = match trie.nodes[at].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        trie.nodes[at].children.insert(c, next);
                        trie.nodes.push(Node::default());
                        next
                    }
                };
            }
            trie.terminals.entry(id.clone()).or_default().push(item);
        }
        Ok(trie)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Number of distinct identifiers.
    pub fn len(&self) -> usize {
        self.terminals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminals.is_empty()
    }

    fn find(&self, prefix: &[usize]) -> Option<usize> {
        let mut at = 0;
        for c in prefix {
            at = *self.nodes[at].children.get(c)?;
        }
        Some(at)
    }

    /// Codes that extend `prefix` towards some catalog identifier, ascending.
    pub fn allowed_next(&self, prefix: &[usize]) -> Vec<usize> {
        if prefix.len() >= self.levels {
            return Vec::new();
        }
        self.find(prefix).map(|n| self.nodes[n].children.keys().copied().collect()).unwrap_or_default()
    }

    pub fn contains(&self, id: &ItemIdentifier) -> bool {
        self.terminals.contains_key(id)
    }

    /// Items sharing `id`, ascending; empty if `id` is not in the catalog.
    pub fn items(&self, id: &ItemIdentifier) -> &[usize] {
        self.terminals.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn identifiers(&self) -> impl Iterator<Item = (&ItemIdentifier, &[usize])> {
        self.terminals.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// One `c1 c2 … cL<TAB>item` line per item, in identifier order.
    pub fn export_text(&self, item_names: impl Fn(usize) -> String) -> String {
        let mut out = String::new();
        for (id, items) in &self.terminals {
            for &it in items {
                for (i, c) in id.tokens().iter().enumerate() {
                    let sep = if i == 0 { "" } else { " " };
                    let _ = write!(out, "{sep}{c}");
                }
                let _ = writeln!(out, "\t{}", item_names(it));
            }
        }
        out
    }

    /// Beam search restricted to catalog identifiers.
    ///
    /// Returns up to `beam_width` identifiers by total log-probability,
    /// highest first, ties in lexicographic order.
    pub fn beam_search(&self, scorer: &mut impl PrefixScorer, beam_width: usize) -> Result<Vec<Beam>> {
        if beam_width == 0 {
            return Err(Error::config("beam width must be >= 1"));
        }
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for depth in 0..self.levels {
            let mut next = Vec::new();
            for (prefix, score) in &beams {
                let allowed = self.allowed_next(prefix);
                if allowed.is_empty() {
                    continue;
                }
                let lp = scorer.code_log_probs(prefix)?;
                for c in allowed {
                    let x = *lp.get(c).ok_or_else(|| Error::data(alloc::format!("scorer returned no log-prob for code {c} at level {depth}")))?;
                    if x.is_nan() {
                        return Err(Error::Divergence(alloc::format!("NaN log-probability at level {depth}")));
                    }
                    if x == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut p = prefix.clone();
                    p.push(c);
                    next.push((p, score + x));
                }
            }
            next.sort_by(rank);
            next.truncate(beam_width);
            beams = next;
        }
        Ok(beams.into_iter().map(|(p, s)| Beam { identifier: ItemIdentifier(p), log_prob: s }).collect())
    }
}
