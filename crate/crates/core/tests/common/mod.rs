#![allow(dead_code)]

use genrec_core::autodiff::{GradMap, ParameterSet};
use genrec_core::nn::{self, SeededRng};
use genrec_core::recommender::{Example, Recommender, RecommenderConfig, Vocabulary};
use genrec_core::tokenizer::{ItemIdentifier, RqTokenizer, TokenizerConfig};
use rand::Rng;

pub fn tok_config(levels: usize, k: usize, din: usize, dc: usize, hidden: &[usize]) -> TokenizerConfig {
    let mut rev = hidden.to_vec();
    rev.reverse();
    TokenizerConfig {
        levels,
        codebook_size: k,
        input_dim: din,
        code_dim: dc,
        encoder_hidden: hidden.to_vec(),
        decoder_hidden: rev,
        beta: 0.25,
    }
}

pub fn rec_config(d: usize, layers: usize, heads: usize, max_history: usize) -> RecommenderConfig {
    RecommenderConfig { d_model: d, layers, heads, head_dim: d / heads, ffn_dim: 2 * d, dropout: 0.0, max_history }
}

pub fn tiny_recommender(seed: u64, levels: usize, k: usize, t: usize) -> Recommender {
    Recommender::new(rec_config(8, 1, 2, t), Vocabulary::new(levels, k), &mut nn::seeded(seed)).unwrap()
}

pub fn gaussian_rows(rng: &mut SeededRng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| nn::normal(rng, &[d], scale).into_data()).collect()
}

pub fn random_ids(rng: &mut SeededRng, n: usize, levels: usize, k: usize) -> Vec<ItemIdentifier> {
    (0..n).map(|_| ItemIdentifier((0..levels).map(|_| rng.random_range(0..k)).collect())).collect()
}

/// Examples over items `0..items` with histories of 0..=t items.
pub fn random_examples(rng: &mut SeededRng, n: usize, items: usize, t: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let h = rng.random_range(0..=t);
            Example { history: (0..h).map(|_| rng.random_range(0..items)).collect(), target: rng.random_range(0..items) }
        })
        .collect()
}

/// Largest violation of `|a − fd| ≤ max(abs, rel·|fd|)` over every scalar,
/// as a ratio (≤ 1 passes), with the worst parameter name.
pub fn fd_check(params: &ParameterSet, grads: &GradMap, eps: f64, abs: f64, rel: f64, f: impl Fn(&ParameterSet) -> f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.value(&name).unwrap().len();
        for i in 0..n {
            let x0 = params.value(&name).unwrap().data()[i];
            p.value_mut(&name).unwrap().data_mut()[i] = x0 + eps;
            let up = f(&p);
            p.value_mut(&name).unwrap().data_mut()[i] = x0 - eps;
            let down = f(&p);
            p.value_mut(&name).unwrap().data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * eps);
            let a = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            let ratio = (a - fd).abs() / abs.max(rel * fd.abs());
            if ratio > worst.0 {
                worst = (ratio, format!("{name}[{i}]: autodiff {a:e} vs fd {fd:e}"));
            }
        }
    }
    worst
}

pub fn tokenizer(seed: u64, cfg: TokenizerConfig) -> RqTokenizer {
    RqTokenizer::new(cfg, &mut nn::seeded(seed)).unwrap()
}
