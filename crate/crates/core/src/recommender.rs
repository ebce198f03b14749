//! Encoder-decoder transformer that generates item identifiers token by token.
//!
//! Histories are flattened into `T·L` tokens, encoded, and the target
//! identifier is decoded autoregressively from a BOS token. Output logits
//! reuse the token embedding matrix. During bi-level training the token
//! embeddings are "mixed": their value is the hard embedding lookup, while
//! gradients flow through the tokenizer's assignment probabilities.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::nn::{self, SeededRng};
use crate::tensor::Tensor;
use crate::tokenizer::{ItemIdentifier, RqTokenizer};
use crate::trie::PrefixScorer;

/// Additive attention mask value.
pub const MASKED: f64 = -1e30;
pub const LN_EPS: f64 = 1e-5;

/// Token index layout: level `l` (0-based), code `c` → `l·K + c`, then BOS and PAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub levels: usize,
    pub codebook_size: usize,
}

impl Vocabulary {
    pub fn new(levels: usize, codebook_size: usize) -> Self {
        Self { levels, codebook_size }
    }

    pub fn size(&self) -> usize {
        self.levels * self.codebook_size + 2
    }

    pub fn bos(&self) -> usize {
        self.levels * self.codebook_size
    }

    pub fn pad(&self) -> usize {
        self.bos() + 1
    }

    pub fn token(&self, level: usize, code: usize) -> Result<usize> {
        if level >= self.levels || code >= self.codebook_size {
            return Err(Error::data(format!("no token for level {level}, code {code}")));
        }
        Ok(level * self.codebook_size + code)
    }

    /// Inverse of [`Vocabulary::token`]; `None` for special tokens.
    pub fn split(&self, token: usize) -> Option<(usize, usize)> {
        (token < self.bos()).then(|| (token / self.codebook_size, token % self.codebook_size))
    }

    pub fn identifier_tokens(&self, id: &ItemIdentifier) -> Result<Vec<usize>> {
        if id.len() != self.levels {
            return Err(Error::data(format!("identifier has {} levels, expected {}", id.len(), self.levels)));
        }
        id.tokens().iter().enumerate().map(|(l, &c)| self.token(l, c)).collect()
    }

    /// Places a level's code distribution into a vocabulary-sized vector.
    pub fn pad_distribution(&self, level: usize, probs: &[f64]) -> Result<Vec<f64>> {
        if level >= self.levels {
            return Err(Error::data(format!("level {level} out of range (L = {})", self.levels)));
        }
        if probs.len() != self.codebook_size {
            return Err(Error::data(format!("{} probabilities for K = {}", probs.len(), self.codebook_size)));
        }
        let mut out = vec![0.0; self.size()];
        out[level * self.codebook_size..(level + 1) * self.codebook_size].copy_from_slice(probs);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommenderConfig {
    pub d_model: usize,
    /// Blocks in each of the encoder and decoder.
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// History length `T` in items; the encoder sees at most `T·L` tokens.
    pub max_history: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 2, heads: 2, head_dim: 32, ffn_dim: 256, dropout: 0.1, max_history: 20 }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_history", self.max_history),
        ] {
            if v < 1 {
                return Err(Error::config(format!("recommender.{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("recommender.dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One training or evaluation case: item indices in chronological order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub history: Vec<usize>,
    pub target: usize,
}

/// Where token embeddings come from.
#[derive(Clone, Copy)]
pub enum TokenSource<'a> {
    /// Fixed identifiers, indexed by item; plain embedding lookups.
    Hard(&'a [ItemIdentifier]),
    /// Identifiers and mixed embeddings computed on the fly by a tokenizer
    /// whose parameters are bound on the same graph.
    Mixed { tokenizer: &'a RqTokenizer, phi: &'a Bound, embeddings: &'a [Vec<f64>] },
}

/// Dropout state threaded through a forward pass.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut SeededRng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut SeededRng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => nn::dropout(g, x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// `o = s + sg[h − s]` for a single token: `h` is row `hard_index` of `E^V`,
/// `s = padded_probs · E^V`. `padded_probs` is 1×V.
pub fn mixed_representation(g: &mut Graph, hard_index: usize, padded_probs: Var, table: Var) -> Result<Var> {
    let hard = g.gather_rows(table, &[hard_index])?;
    let soft = g.matmul(padded_probs, table)?;
    g.straight_through(hard, soft)
}

/// Encoder input for one history: tokens, absolute positions and PAD flags.
///
/// Histories shorter than `T` are conceptually left-padded to `T·L` tokens.
/// Masked PAD keys contribute exact zeros to attention, so the padding is
/// dropped and the real tokens keep their absolute positions. An empty
/// history keeps the full padded input.
#[derive(Clone, Debug, PartialEq)]
struct EncoderInput {
    tokens: Vec<usize>,
    /// Row of each token in the soft embedding table.
    rows: Vec<usize>,
    positions: Vec<usize>,
    pad: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommender {
    pub config: RecommenderConfig,
    pub vocab: Vocabulary,
    pub params: ParameterSet,
}

fn ln_name(prefix: &str) -> (String, String) {
    (format!("{prefix}.g"), format!("{prefix}.b"))
}

fn init_ln(params: &mut ParameterSet, prefix: &str, d: usize) -> Result<()> {
    let (g, b) = ln_name(prefix);
    params.insert(g, Tensor::filled(&[d], 1.0))?;
    params.insert(b, Tensor::zeros(&[d]))
}

fn init_attention(params: &mut ParameterSet, rng: &mut SeededRng, prefix: &str, cfg: &RecommenderConfig) -> Result<()> {
    let std = 1.0 / libm::sqrt(cfg.d_model as f64);
    for h in 0..cfg.heads {
        for which in ["q", "k", "v"] {
            params.insert(format!("{prefix}.{which}.{h}"), nn::normal(rng, &[cfg.d_model, cfg.head_dim], std))?;
        }
    }
    nn::init_linear(params, rng, &format!("{prefix}.o"), cfg.heads * cfg.head_dim, cfg.d_model)
}

fn causal_mask(m: usize) -> Tensor {
    let mut t = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in i + 1..m {
            t.data_mut()[i * m + j] = MASKED;
        }
    }
    t
}

fn key_mask(rows: usize, pad: &[bool]) -> Option<Tensor> {
    if !pad.iter().any(|&p| p) {
        return None;
    }
    let n = pad.len();
    let mut t = Tensor::zeros(&[rows, n]);
    for i in 0..rows {
        for (j, &p) in pad.iter().enumerate() {
            if p {
                t.data_mut()[i * n + j] = MASKED;
            }
        }
    }
    Some(t)
}

impl Recommender {
    pub fn new(config: RecommenderConfig, vocab: Vocabulary, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if vocab.levels < 1 || vocab.codebook_size < 1 {
            return Err(Error::config("vocabulary needs at least one level and one code"));
        }
        let d = config.d_model;
        let std = 1.0 / libm::sqrt(d as f64);
        let mut p = ParameterSet::new();
        p.insert("embed.tokens", nn::normal(rng, &[vocab.size(), d], std))?;
        p.insert("embed.enc_pos", nn::normal(rng, &[config.max_history * vocab.levels, d], std))?;
        p.insert("embed.dec_pos", nn::normal(rng, &[vocab.levels, d], std))?;
        for i in 0..config.layers {
            let b = format!("encoder.{i}");
            init_ln(&mut p, &format!("{b}.ln1"), d)?;
            init_attention(&mut p, rng, &format!("{b}.attn"), &config)?;
            init_ln(&mut p, &format!("{b}.ln2"), d)?;
            nn::init_mlp(&mut p, rng, &format!("{b}.ffn"), &[d, config.ffn_dim, d])?;
        }
        init_ln(&mut p, "encoder.ln", d)?;
        for i in 0..config.layers {
            let b = format!("decoder.{i}");
            init_ln(&mut p, &format!("{b}.ln1"), d)?;
            init_attention(&mut p, rng, &format!("{b}.self_attn"), &config)?;
            init_ln(&mut p, &format!("{b}.ln2"), d)?;
            init_attention(&mut p, rng, &format!("{b}.cross_attn"), &config)?;
            init_ln(&mut p, &format!("{b}.ln3"), d)?;
            nn::init_mlp(&mut p, rng, &format!("{b}.ffn"), &[d, config.ffn_dim, d])?;
        }
        init_ln(&mut p, "decoder.ln", d)?;
        Ok(Self { config, vocab, params: p })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: RecommenderConfig, vocab: Vocabulary, params: ParameterSet) -> Result<Self> {
        let reference = Self::new(config.clone(), vocab, &mut nn::seeded(0))?;
        if reference.params.names().ne(params.names()) {
            return Err(Error::data("recommender checkpoint tensors do not match the configuration"));
        }
        for (name, p) in reference.params.iter() {
            if params.value(name)?.shape() != p.value.shape() {
                return Err(Error::data(format!("recommender tensor `{name}` has the wrong shape")));
            }
        }
        Ok(Self { config, vocab, params })
    }

    pub fn max_input_tokens(&self) -> usize {
        self.config.max_history * self.vocab.levels
    }

    fn layer_norm(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let (gn, bn) = ln_name(prefix);
        let n = g.shape(x)[0];
        let y = g.layer_norm(x, LN_EPS)?;
        let gain = p.var(&gn)?;
        let gain = g.bcast_rows(gain, n)?;
        let y = g.mul(y, gain)?;
        g.add_row_bias(y, p.var(&bn)?)
    }

    fn attention(&self, g: &mut Graph, p: &Bound, prefix: &str, xq: Var, xkv: Var, mask: Option<&Tensor>) -> Result<Var> {
        let scale = 1.0 / libm::sqrt(self.config.head_dim as f64);
        // masked scores are replaced, not offset, so they carry no gradient
        // even when every key of a row is masked
        let mask = mask.map(|m| (m.map(|x| if x == 0.0 { 1.0 } else { 0.0 }), g.constant(m.clone())));
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = g.matmul(xq, p.var(&format!("{prefix}.q.{h}"))?)?;
            let k = g.matmul(xkv, p.var(&format!("{prefix}.k.{h}"))?)?;
            let v = g.matmul(xkv, p.var(&format!("{prefix}.v.{h}"))?)?;
            let s = g.matmul_nt(q, k)?;
            let mut s = g.scale(s, scale);
            if let Some((keep, m)) = &mask {
                s = g.mul_const(s, keep.clone())?;
                s = g.add(s, *m)?;
            }
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, v)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        nn::linear(g, p, &format!("{prefix}.o"), cat)
    }

    fn ffn(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        nn::mlp(g, p, prefix, 2, x)
    }

    /// Encoder over already-embedded input tokens (n×d). `pad[i]` masks
    /// position `i` as an attention key.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var, positions: &[usize], pad: &[bool], drop: &mut Dropout) -> Result<Var> {
        let n = g.shape(x)[0];
        if n == 0 || n != positions.len() || n != pad.len() {
            return Err(Error::data(format!("encoder input of {n} tokens with {} positions", positions.len())));
        }
        if positions.iter().any(|&t| t >= self.max_input_tokens()) {
            return Err(Error::data(format!("encoder input longer than {} tokens", self.max_input_tokens())));
        }
        let pos = g.gather_rows(p.var("embed.enc_pos")?, positions)?;
        let mut h = g.add(x, pos)?;
        h = drop.apply(g, h)?;
        let mask = key_mask(n, pad);
        for i in 0..self.config.layers {
            let b = format!("encoder.{i}");
            let a = self.layer_norm(g, p, &format!("{b}.ln1"), h)?;
            let a = self.attention(g, p, &format!("{b}.attn"), a, a, mask.as_ref())?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let f = self.layer_norm(g, p, &format!("{b}.ln2"), h)?;
            let f = self.ffn(g, p, &format!("{b}.ffn"), f)?;
            let f = drop.apply(g, f)?;
            h = g.add(h, f)?;
        }
        self.layer_norm(g, p, "encoder.ln", h)
    }

    /// Causal decoder over embedded target-side inputs (m×d, BOS first),
    /// cross-attending to `enc` whose PAD keys are flagged in `enc_pad`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, enc: Var, enc_pad: &[bool], y: Var, drop: &mut Dropout) -> Result<Var> {
        let m = g.shape(y)[0];
        if m == 0 || m > self.vocab.levels {
            return Err(Error::data(format!("decoder input of {m} tokens (at most {})", self.vocab.levels)));
        }
        let positions: Vec<usize> = (0..m).collect();
        let pos = g.gather_rows(p.var("embed.dec_pos")?, &positions)?;
        let mut h = g.add(y, pos)?;
        h = drop.apply(g, h)?;
        let causal = (m > 1).then(|| causal_mask(m));
        let cross = key_mask(m, enc_pad);
        for i in 0..self.config.layers {
            let b = format!("decoder.{i}");
            let a = self.layer_norm(g, p, &format!("{b}.ln1"), h)?;
            let a = self.attention(g, p, &format!("{b}.self_attn"), a, a, causal.as_ref())?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let c = self.layer_norm(g, p, &format!("{b}.ln2"), h)?;
            let c = self.attention(g, p, &format!("{b}.cross_attn"), c, enc, cross.as_ref())?;
            let c = drop.apply(g, c)?;
            h = g.add(h, c)?;
            let f = self.layer_norm(g, p, &format!("{b}.ln3"), h)?;
            let f = self.ffn(g, p, &format!("{b}.ffn"), f)?;
            let f = drop.apply(g, f)?;
            h = g.add(h, f)?;
        }
        self.layer_norm(g, p, "decoder.ln", h)
    }

    /// Vocabulary logits `H^D · E^Vᵀ`.
    pub fn score(&self, g: &mut Graph, p: &Bound, dec: Var) -> Result<Var> {
        g.matmul_nt(dec, p.var("embed.tokens")?)
    }

    fn encoder_input(&self, history: &[ItemIdentifier], rows_of: impl Fn(usize, usize) -> usize, special_row: impl Fn(usize) -> usize) -> Result<EncoderInput> {
        let t = self.config.max_history;
        if history.len() > t {
            return Err(Error::data(format!("history of {} items exceeds the maximum of {t}", history.len())));
        }
        let levels = self.vocab.levels;
        if history.is_empty() {
            let n = t * levels;
            let pad = self.vocab.pad();
            return Ok(EncoderInput {
                tokens: vec![pad; n],
                rows: vec![special_row(pad); n],
                positions: (0..n).collect(),
                pad: vec![true; n],
            });
        }
        let offset = (t - history.len()) * levels;
        let mut out = EncoderInput { tokens: Vec::new(), rows: Vec::new(), positions: Vec::new(), pad: Vec::new() };
        for (i, id) in history.iter().enumerate() {
            for (l, tok) in self.vocab.identifier_tokens(id)?.into_iter().enumerate() {
                out.tokens.push(tok);
                out.rows.push(rows_of(i, l));
                out.positions.push(offset + i * levels + l);
                out.pad.push(false);
            }
        }
        Ok(out)
    }

    /// Mean over the batch of `−Σ_l log P(Y_l | history, Y_<l)`.
    pub fn recommendation_loss(&self, g: &mut Graph, theta: &Bound, batch: &[Example], source: TokenSource, drop: &mut Dropout) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("recommendation batch"));
        }
        let levels = self.vocab.levels;
        let k = self.vocab.codebook_size;
        let ev = theta.var("embed.tokens")?;

        // every distinct item in the batch, in ascending order
        let items: Vec<usize> = batch
            .iter()
            .flat_map(|ex| ex.history.iter().chain(core::iter::once(&ex.target)))
            .copied()
            .collect::<BTreeSet<usize>>()
            .into_iter()
            .collect();
        let slot: BTreeMap<usize, usize> = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
        let u = items.len();

        let (ids, table): (Vec<ItemIdentifier>, Option<Var>) = match source {
            TokenSource::Hard(all) => {
                let ids = items
                    .iter()
                    .map(|&it| all.get(it).cloned().ok_or_else(|| Error::data(format!("no identifier for item {it}"))))
                    .collect::<Result<_>>()?;
                (ids, None)
            }
            TokenSource::Mixed { tokenizer, phi, embeddings } => {
                if tokenizer.config.levels != levels || tokenizer.config.codebook_size != k {
                    return Err(Error::config("tokenizer and recommender vocabularies differ"));
                }
                let rows: Vec<Vec<f64>> = items
                    .iter()
                    .map(|&it| embeddings.get(it).cloned().ok_or_else(|| Error::data(format!("no embedding for item {it}"))))
                    .collect::<Result<_>>()?;
                let z = g.constant(Tensor::from_rows(&rows)?);
                let fwd = tokenizer.forward(g, phi, z)?;
                let ids = (0..u).map(|i| fwd.identifier(i)).collect();
                // soft rows: level l of item i sits at l·u + i; BOS and PAD follow
                let mut parts = Vec::with_capacity(levels + 1);
                for (l, &pr) in fwd.probs.iter().enumerate() {
                    let block = g.slice_rows(ev, l * k, k)?;
                    parts.push(g.matmul(pr, block)?);
                }
                parts.push(g.slice_rows(ev, levels * k, 2)?);
                (ids, Some(g.concat_rows(&parts)?))
            }
        };
        let special_row = |tok: usize| levels * u + (tok - self.vocab.bos());

        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let hist: Vec<ItemIdentifier> = ex.history.iter().map(|it| ids[slot[it]].clone()).collect();
            let hist_slots: Vec<usize> = ex.history.iter().map(|it| slot[it]).collect();
            let enc_in = self.encoder_input(&hist, |i, l| l * u + hist_slots[i], special_row)?;
            let target_slot = slot[&ex.target];
            let targets = self.vocab.identifier_tokens(&ids[target_slot])?;
            let mut dec_tokens = vec![self.vocab.bos()];
            dec_tokens.extend_from_slice(&targets[..levels - 1]);
            let mut dec_rows = vec![special_row(self.vocab.bos())];
            dec_rows.extend((0..levels - 1).map(|l| l * u + target_slot));

            let embed = |g: &mut Graph, tokens: &[usize], rows: &[usize]| -> Result<Var> {
                let hard = g.gather_rows(ev, tokens)?;
                match table {
                    Some(t) => {
                        let soft = g.gather_rows(t, rows)?;
                        g.straight_through(hard, soft)
                    }
                    None => Ok(hard),
                }
            };
            let x = embed(g, &enc_in.tokens, &enc_in.rows)?;
            let y = embed(g, &dec_tokens, &dec_rows)?;
            let enc = self.encode(g, theta, x, &enc_in.positions, &enc_in.pad, drop)?;
            let dec = self.decode(g, theta, enc, &enc_in.pad, y, drop)?;
            let logits = self.score(g, theta, dec)?;
            losses.push(g.nll(logits, &targets)?);
        }
        let total = g.add_all(&losses)?;
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Loss value with fixed identifiers and no dropout.
    pub fn loss_value(&self, batch: &[Example], ids: &[ItemIdentifier]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = self.recommendation_loss(&mut g, &p, batch, TokenSource::Hard(ids), &mut Dropout::off())?;
        Ok(g.value(l).item())
    }

    /// Prefix scorer for decoding the next item after `history`.
    pub fn scorer(&self, history: &[ItemIdentifier]) -> Result<Scorer<'_>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let enc_in = self.encoder_input(history, |_, _| 0, |_| 0)?;
        let x = g.gather_rows(p.var("embed.tokens")?, &enc_in.tokens)?;
        let enc = self.encode(&mut g, &p, x, &enc_in.positions, &enc_in.pad, &mut Dropout::off())?;
        let base = g.len();
        Ok(Scorer { model: self, graph: g, params: p, enc, pad: enc_in.pad, base })
    }
}

/// Next-code log-probabilities for one encoded history.
pub struct Scorer<'m> {
    model: &'m Recommender,
    graph: Graph,
    params: Bound,
    enc: Var,
    pad: Vec<bool>,
    base: usize,
}

impl Scorer<'_> {
    /// Full-vocabulary log-probabilities at the position after `prefix`.
    pub fn vocab_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let vocab = self.model.vocab;
        if prefix.len() >= vocab.levels {
            return Err(Error::data("prefix already has every level"));
        }
        let mut tokens = vec![vocab.bos()];
        for (l, &c) in prefix.iter().enumerate() {
            tokens.push(vocab.token(l, c)?);
        }
        let g = &mut self.graph;
        g.truncate(self.base);
        let y = g.gather_rows(self.params.var("embed.tokens")?, &tokens)?;
        let dec = self.model.decode(g, &self.params, self.enc, &self.pad, y, &mut Dropout::off())?;
        let last = g.slice_rows(dec, prefix.len(), 1)?;
        let logits = self.model.score(g, &self.params, last)?;
        let lp = g.log_softmax_rows(logits);
        Ok(g.value(lp).data().to_vec())
    }
}

impl PrefixScorer for Scorer<'_> {
    fn code_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let k = self.model.vocab.codebook_size;
        let l = prefix.len();
        let all = self.vocab_log_probs(prefix)?;
        Ok(all[l * k..(l + 1) * k].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerConfig;

    fn small(levels: usize, k: usize, seed: u64) -> Recommender {
        let cfg = RecommenderConfig { d_model: 8, layers: 2, heads: 2, head_dim: 4, ffn_dim: 16, dropout: 0.0, max_history: 3 };
        Recommender::new(cfg, Vocabulary::new(levels, k), &mut nn::seeded(seed)).unwrap()
    }

    fn ids(n: usize, levels: usize, k: usize) -> Vec<ItemIdentifier> {
        (0..n).map(|i| ItemIdentifier((0..levels).map(|l| (i * (l + 1) + l) % k).collect())).collect()
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(2, 2);
        assert_eq!(v.size(), 6);
        assert_eq!((v.bos(), v.pad()), (4, 5));
        assert_eq!(v.pad_distribution(1, &[0.3, 0.7]).unwrap(), vec![0.0, 0.0, 0.3, 0.7, 0.0, 0.0]);
        assert_eq!(v.pad_distribution(0, &[0.0, 1.0]).unwrap()[v.token(0, 1).unwrap()], 1.0);
        assert!(v.pad_distribution(2, &[0.5, 0.5]).is_err());
        for t in 0..4 {
            let (l, c) = v.split(t).unwrap();
            assert_eq!(v.token(l, c).unwrap(), t);
        }
        assert_eq!(v.split(v.bos()), None);
    }

    #[test]
    fn uniform_logits_give_l_ln_v() {
        let mut m = small(3, 4, 0);
        let v = m.vocab.size();
        m.params.set_value("embed.tokens", Tensor::zeros(&[v, 8])).unwrap();
        let batch = vec![Example { history: vec![0, 1], target: 2 }, Example { history: vec![], target: 1 }];
        let loss = m.loss_value(&batch, &ids(3, 3, 4)).unwrap();
        assert!((loss - 3.0 * libm::log(v as f64)).abs() < 1e-12);
    }

    #[test]
    fn over_length_history_is_rejected() {
        let m = small(2, 3, 0);
        let batch = vec![Example { history: vec![0, 1, 2, 0], target: 1 }];
        assert!(m.loss_value(&batch, &ids(3, 2, 3)).is_err());
        assert!(m.loss_value(&[], &ids(3, 2, 3)).is_err());
    }

    #[test]
    fn zero_stack_passes_normalized_input_through() {
        let mut m = small(2, 3, 1);
        let names: Vec<String> = m.params.names().filter(|n| n.contains(".attn.") || n.contains(".ffn.")).map(String::from).collect();
        for n in names {
            let z = Tensor::zeros(m.params.value(&n).unwrap().shape());
            m.params.set_value(&n, z).unwrap();
        }
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let x = g.gather_rows(p.var("embed.tokens").unwrap(), &[2]).unwrap();
        let h = m.encode(&mut g, &p, x, &[5], &[false], &mut Dropout::off()).unwrap();
        let pos = g.gather_rows(p.var("embed.enc_pos").unwrap(), &[5]).unwrap();
        let sum = g.add(x, pos).unwrap();
        let want = g.layer_norm(sum, LN_EPS).unwrap();
        assert_eq!(g.value(h), g.value(want));
        assert!(g.value(h).is_finite());
    }

    #[test]
    fn trimmed_padding_matches_full_padding() {
        let m = small(2, 3, 2);
        let hist = ids(2, 2, 3);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let ev = p.var("embed.tokens").unwrap();
        let trimmed = m.encoder_input(&hist, |_, _| 0, |_| 0).unwrap();
        assert_eq!(trimmed.positions, vec![2, 3, 4, 5]);
        let mut full_tokens = vec![m.vocab.pad(); 2];
        full_tokens.extend(&trimmed.tokens);
        let full_pad = [true, true, false, false, false, false];
        let xt = g.gather_rows(ev, &trimmed.tokens).unwrap();
        let xf = g.gather_rows(ev, &full_tokens).unwrap();
        let ht = m.encode(&mut g, &p, xt, &trimmed.positions, &trimmed.pad, &mut Dropout::off()).unwrap();
        let hf = m.encode(&mut g, &p, xf, &[0, 1, 2, 3, 4, 5], &full_pad, &mut Dropout::off()).unwrap();
        let tail = g.slice_rows(hf, 2, 4).unwrap();
        assert_eq!(g.value(ht).data(), g.value(tail).data());
        let y = g.gather_rows(ev, &[m.vocab.bos(), 1]).unwrap();
        let dt = m.decode(&mut g, &p, ht, &trimmed.pad, y, &mut Dropout::off()).unwrap();
        let df = m.decode(&mut g, &p, hf, &full_pad, y, &mut Dropout::off()).unwrap();
        assert_eq!(g.value(dt).data(), g.value(df).data());
    }

    #[test]
    fn decoder_is_causal() {
        let m = small(3, 4, 3);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let ev = p.var("embed.tokens").unwrap();
        let x = g.gather_rows(ev, &[0, 5, 9]).unwrap();
        let enc = m.encode(&mut g, &p, x, &[3, 4, 5], &[false; 3], &mut Dropout::off()).unwrap();
        let bos = m.vocab.bos();
        let a = g.gather_rows(ev, &[bos, 1, 6]).unwrap();
        let b = g.gather_rows(ev, &[bos, 1, 7]).unwrap();
        let da = m.decode(&mut g, &p, enc, &[false; 3], a, &mut Dropout::off()).unwrap();
        let db = m.decode(&mut g, &p, enc, &[false; 3], b, &mut Dropout::off()).unwrap();
        assert_eq!(g.value(da).data()[..16], g.value(db).data()[..16]);
        assert_ne!(g.value(da).data()[16..], g.value(db).data()[16..]);
    }

    #[test]
    fn zero_decoder_state_gives_uniform_scores() {
        let m = small(2, 2, 0);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let h = g.constant(Tensor::zeros(&[1, 8]));
        let s = m.score(&mut g, &p, h).unwrap();
        assert!(g.value(s).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mixed_forward_equals_hard_forward() {
        let tcfg = TokenizerConfig { levels: 2, codebook_size: 3, input_dim: 4, code_dim: 3, encoder_hidden: vec![5], decoder_hidden: vec![5], beta: 0.25 };
        let tok = RqTokenizer::new(tcfg, &mut nn::seeded(7)).unwrap();
        let emb: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect()).collect();
        let cat = tok.tokenize_catalog(&emb).unwrap();
        let m = small(2, 3, 7);
        let batch = vec![Example { history: vec![0, 3], target: 1 }, Example { history: vec![2], target: 0 }];
        let hard = m.loss_value(&batch, &cat.identifiers).unwrap();
        let mut g = Graph::new();
        let phi = tok.params.bind(&mut g, true);
        let theta = m.params.bind(&mut g, true);
        let src = TokenSource::Mixed { tokenizer: &tok, phi: &phi, embeddings: &emb };
        let l = m.recommendation_loss(&mut g, &theta, &batch, src, &mut Dropout::off()).unwrap();
        assert_eq!(g.value(l).item().to_bits(), hard.to_bits());
        let grads = g.gradients(l, &phi).unwrap();
        assert!(grads["codebook.0"].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn scorer_sums_to_sequence_likelihood() {
        let m = small(2, 3, 5);
        let all = ids(3, 2, 3);
        let hist = vec![all[0].clone(), all[2].clone()];
        let mut s = m.scorer(&hist).unwrap();
        let target = &all[1];
        let lp0 = s.code_log_probs(&[]).unwrap()[target.0[0]];
        let lp1 = s.code_log_probs(&target.0[..1]).unwrap()[target.0[1]];
        let loss = m.loss_value(&[Example { history: vec![0, 2], target: 1 }], &all).unwrap();
        assert!((lp0 + lp1 + loss).abs() < 1e-12);
    }
}
