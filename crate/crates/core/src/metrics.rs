//! Full-ranking evaluation and codebook usage statistics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recommender::{Example, Recommender};
use crate::tokenizer::ItemIdentifier;
use crate::trie::{Beam, IdentifierTrie};

/// Ranked items produced for one user and the item they actually chose.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingResult {
    pub ranked: Vec<usize>,
    pub target: usize,
}

impl RankingResult {
    /// 1-based rank of the target, if it was retrieved.
    pub fn target_rank(&self) -> Option<usize> {
        self.ranked.iter().position(|&i| i == self.target).map(|p| p + 1)
    }
}

/// Replaces each identifier by its items; colliding items are listed
/// consecutively in ascending order.
pub fn expand_beams(beams: &[Beam], trie: &IdentifierTrie) -> Vec<usize> {
    beams.iter().flat_map(|b| trie.items(&b.identifier).iter().copied()).collect()
}

/// Constrained decoding for one history, expanded to items.
pub fn rank_items(model: &Recommender, history: &[ItemIdentifier], trie: &IdentifierTrie, beam: usize) -> Result<Vec<usize>> {
    let mut scorer = model.scorer(history)?;
    let beams = trie.beam_search(&mut scorer, beam)?;
    Ok(expand_beams(&beams, trie))
}

pub fn recall_at_k(results: &[RankingResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results.iter().filter(|r| r.target_rank().is_some_and(|p| p <= k)).count();
    hits as f64 / results.len() as f64
}

pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .filter_map(|r| r.target_rank())
        .filter(|&p| p <= k)
        .map(|p| 1.0 / libm::log2(p as f64 + 1.0))
        .sum();
    total / results.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    /// Fraction of the K codes used at each level.
    pub density: Vec<f64>,
    /// Entropy in bits of the code usage frequencies at each level.
    pub entropy: Vec<f64>,
}

pub fn codebook_stats(ids: &[ItemIdentifier], levels: usize, k: usize) -> Result<CodebookStats> {
    if k == 0 {
        return Err(Error::config("codebook size must be >= 1"));
    }
    let mut counts = vec![vec![0usize; k]; levels];
    for id in ids {
        if id.len() != levels {
            return Err(Error::data(alloc::format!("identifier with {} levels, expected {levels}", id.len())));
        }
        for (l, &c) in id.tokens().iter().enumerate() {
            if c >= k {
                return Err(Error::data(alloc::format!("code {c} out of range for K = {k}")));
            }
            counts[l][c] += 1;
        }
    }
    let n = ids.len() as f64;
    let mut density = Vec::with_capacity(levels);
    let mut entropy = Vec::with_capacity(levels);
    for row in &counts {
        density.push(row.iter().filter(|&&c| c > 0).count() as f64 / k as f64);
        let h: f64 = row
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * libm::log2(p)
            })
            .sum();
        entropy.push(h);
    }
    Ok(CodebookStats { density, entropy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    pub density: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// Ranks every example's target with constrained decoding.
pub fn rank_examples(model: &Recommender, catalog: &[ItemIdentifier], trie: &IdentifierTrie, examples: &[Example], beam: usize) -> Result<Vec<RankingResult>> {
    examples
        .iter()
        .map(|ex| {
            let hist: Vec<ItemIdentifier> = ex
                .history
                .iter()
                .map(|&i| catalog.get(i).cloned().ok_or_else(|| Error::data(alloc::format!("no identifier for item {i}"))))
                .collect::<Result<_>>()?;
            Ok(RankingResult { ranked: rank_items(model, &hist, trie, beam)?, target: ex.target })
        })
        .collect()
}

pub fn report(results: &[RankingResult], stats: CodebookStats) -> EvalReport {
    EvalReport {
        recall_5: recall_at_k(results, 5),
        ndcg_5: ndcg_at_k(results, 5),
        recall_10: recall_at_k(results, 10),
        ndcg_10: ndcg_at_k(results, 10),
        density: stats.density,
        entropy: stats.entropy,
    }
}

/// Builds the trie from `catalog`, ranks `examples` and summarizes.
pub fn evaluate(model: &Recommender, catalog: &[ItemIdentifier], examples: &[Example], beam: usize) -> Result<EvalReport> {
    let trie = IdentifierTrie::build(catalog)?;
    let results = rank_examples(model, catalog, &trie, examples, beam)?;
    let stats = codebook_stats(catalog, model.vocab.levels, model.vocab.codebook_size)?;
    Ok(report(&results, stats))
}
