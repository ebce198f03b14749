//! Interaction data: k-core filtering, leave-one-out splits, training
//! examples and a seeded synthetic generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::recommender::Example;

/// Users with their chronological item sequences, in input order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawInteractions {
    pub users: Vec<(String, Vec<String>)>,
}

impl RawInteractions {
    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|(_, s)| s.len()).sum()
    }
}

/// Repeatedly drops users and items with fewer than `min` interactions.
pub fn k_core(raw: &RawInteractions, min: usize) -> Result<RawInteractions> {
    let mut cur = raw.clone();
    loop {
        let mut count: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, seq) in &cur.users {
            for it in seq {
                *count.entry(it.as_str()).or_default() += 1;
            }
        }
        let mut next = RawInteractions::default();
        for (u, seq) in &cur.users {
            let kept: Vec<String> = seq.iter().filter(|it| count[it.as_str()] >= min).cloned().collect();
            if kept.len() >= min {
                next.users.push((u.clone(), kept));
            }
        }
        if next.users.is_empty() {
            return Err(Error::data(format!("no users left after {min}-core filtering")));
        }
        if next == cur {
            return Ok(next);
        }
        cur = next;
    }
}

pub fn five_core(raw: &RawInteractions) -> Result<RawInteractions> {
    k_core(raw, 5)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: String,
    /// At most `max_history` most recent items before validation.
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDataset {
    /// Item ids; an item's index here is its dense id. Sorted.
    pub items: Vec<String>,
    pub users: Vec<UserSplit>,
}

/// Last item for test, second to last for validation, the rest (most recent
/// `max_history`) for training.
pub fn leave_one_out(raw: &RawInteractions, max_history: usize) -> Result<InteractionDataset> {
    let items: Vec<String> = raw.users.iter().flat_map(|(_, s)| s.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut users = Vec::with_capacity(raw.users.len());
    for (u, seq) in &raw.users {
        if seq.len() < 3 {
            return Err(Error::data(format!("user `{u}` has {} interactions; at least 3 are needed", seq.len())));
        }
        let ids: Vec<usize> = seq.iter().map(|s| index[s.as_str()]).collect();
        let n = ids.len();
        let start = (n - 2).saturating_sub(max_history);
        users.push(UserSplit { user: u.clone(), train: ids[start..n - 2].to_vec(), valid: ids[n - 2], test: ids[n - 1] });
    }
    Ok(InteractionDataset { items, users })
}

fn tail(seq: &[usize], n: usize) -> Vec<usize> {
    seq[seq.len().saturating_sub(n)..].to_vec()
}

impl InteractionDataset {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Every next-item prediction inside the training prefixes.
    pub fn train_examples(&self, max_history: usize) -> Vec<Example> {
        let mut out = Vec::new();
        for u in &self.users {
            for t in 1..u.train.len() {
                out.push(Example { history: tail(&u.train[..t], max_history), target: u.train[t] });
            }
        }
        out
    }

    pub fn valid_examples(&self, max_history: usize) -> Vec<Example> {
        self.users.iter().map(|u| Example { history: tail(&u.train, max_history), target: u.valid }).collect()
    }

    pub fn test_examples(&self, max_history: usize) -> Vec<Example> {
        self.users
            .iter()
            .map(|u| {
                let mut h = u.train.clone();
                h.push(u.valid);
                Example { history: tail(&h, max_history), target: u.test }
            })
            .collect()
    }
}

/// Item embeddings keyed by item id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn insert(&mut self, item: String, v: Vec<f64>) -> Result<()> {
        if self.rows.is_empty() && self.dim == 0 {
            self.dim = v.len();
        }
        if v.len() != self.dim {
            return Err(Error::data(format!("embedding for `{item}` has width {}, expected {}", v.len(), self.dim)));
        }
        if self.rows.contains_key(&item) {
            return Err(Error::data(format!("duplicate embedding for `{item}`")));
        }
        self.rows.insert(item, v);
        Ok(())
    }

    /// Rows for `items`, in that order.
    pub fn for_items(&self, items: &[String]) -> Result<Vec<Vec<f64>>> {
        items
            .iter()
            .map(|it| self.rows.get(it).cloned().ok_or_else(|| Error::data(format!("no embedding for item `{it}`"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub items: usize,
    pub users: usize,
    pub clusters: usize,
    /// Interactions per user.
    pub seq_len: usize,
    pub dim: usize,
    /// Standard deviation of item embeddings around their cluster center.
    pub noise: f64,
    /// Standard deviation of the cluster centers.
    pub center_scale: f64,
    /// Probability of jumping to a random cluster instead of following the rule.
    pub jump_prob: f64,
    /// Not read from config files; drivers derive it from their own seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { items: 50, users: 200, clusters: 50, seq_len: 8, dim: 16, noise: 0.0, center_scale: 1.0, jump_prob: 0.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 1 || self.items < self.clusters {
            return Err(Error::config(format!("synth needs 1 <= clusters <= items (got {} clusters, {} items)", self.clusters, self.items)));
        }
        if self.users < 1 || self.dim < 1 {
            return Err(Error::config("synth.users and synth.dim must be >= 1"));
        }
        if self.seq_len < 3 {
            return Err(Error::config("synth.seq_len must be >= 3"));
        }
        if !(self.noise >= 0.0) || !(self.center_scale > 0.0) {
            return Err(Error::config("synth.noise must be >= 0 and synth.center_scale > 0"));
        }
        if !(0.0..=1.0).contains(&self.jump_prob) {
            return Err(Error::config("synth.jump_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

/// A generated corpus together with the rule that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub interactions: RawInteractions,
    pub embeddings: EmbeddingTable,
    /// `successor[i]` follows item `i` whenever no jump happens.
    pub successor: Vec<usize>,
}

pub fn item_name(i: usize) -> String {
    format!("i{i:04}")
}

pub fn user_name(u: usize) -> String {
    format!("u{u:04}")
}

/// Items belong to cluster `i mod C` and sit at position `i div C` inside it.
/// Clusters follow a seeded cyclic order; the successor of an item is the
/// member of the next cluster at the same position (modulo its size).
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = nn::seeded(cfg.seed);
    let c = cfg.clusters;
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * cfg.center_scale
                })
                .collect()
        })
        .collect();
    let mut embeddings = EmbeddingTable::default();
    for i in 0..cfg.items {
        let v = centers[i % c]
            .iter()
            .map(|&m| {
                if cfg.noise == 0.0 {
                    m
                } else {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    m + cfg.noise * x
                }
            })
            .collect();
        embeddings.insert(item_name(i), v)?;
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    let mut next_cluster = alloc::vec![0; c];
    for j in 0..c {
        next_cluster[order[j]] = order[(j + 1) % c];
    }
    let members: Vec<Vec<usize>> = (0..c).map(|k| (k..cfg.items).step_by(c).collect()).collect();
    let successor: Vec<usize> = (0..cfg.items)
        .map(|i| {
            let m = &members[next_cluster[i % c]];
            m[(i / c) % m.len()]
        })
        .collect();

    let mut interactions = RawInteractions::default();
    for u in 0..cfg.users {
        let mut cur = rng.random_range(0..cfg.items);
        let mut seq = Vec::with_capacity(cfg.seq_len);
        seq.push(item_name(cur));
        for _ in 1..cfg.seq_len {
            cur = if cfg.jump_prob > 0.0 && rng.random::<f64>() < cfg.jump_prob {
                let m = &members[rng.random_range(0..c)];
                m[rng.random_range(0..m.len())]
            } else {
                successor[cur]
            };
            seq.push(item_name(cur));
        }
        interactions.users.push((user_name(u), seq));
    }
    Ok(SynthCorpus { interactions, embeddings, successor })
}
