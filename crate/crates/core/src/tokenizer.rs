//! Residual-quantization item tokenizer.
//!
//! An MLP encoder maps an item's semantic embedding `z` to a latent `r`.
//! Each of the `L` codebooks quantizes the residual left by the previous
//! levels; the chosen code indices form the item's identifier. An MLP
//! decoder reconstructs `z` from the sum of the chosen codewords.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::nn::{self, SeededRng};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Number of codebooks `L` (identifier length).
    pub levels: usize,
    /// Codewords per codebook `K`.
    pub codebook_size: usize,
    /// Width of the semantic embedding; 0 means "take it from the data".
    pub input_dim: usize,
    /// Codeword width.
    pub code_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            codebook_size: 256,
            input_dim: 0,
            code_dim: 32,
            encoder_hidden: alloc::vec![128, 64],
            decoder_hidden: alloc::vec![64, 128],
            beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("tokenizer.levels must be >= 1"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("tokenizer.codebook_size must be >= 2"));
        }
        if self.code_dim < 1 {
            return Err(Error::config("tokenizer.code_dim must be >= 1"));
        }
        if self.input_dim < 1 {
            return Err(Error::config("tokenizer.input_dim must be >= 1"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("tokenizer.beta must be > 0"));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::config("tokenizer hidden widths must be >= 1"));
        }
        Ok(())
    }

    fn encoder_layers(&self) -> usize {
        self.encoder_hidden.len() + 1
    }

    fn decoder_layers(&self) -> usize {
        self.decoder_hidden.len() + 1
    }
}

/// Per-level code indices of one item.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemIdentifier(pub Vec<usize>);

impl ItemIdentifier {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Everything produced while quantizing one latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationTrace {
    /// `v_1 .. v_L`; `v_1` is the latent itself.
    pub residuals: Vec<Vec<f64>>,
    /// Residual left after the last level, `v_{L+1}`.
    pub final_residual: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    pub identifier: ItemIdentifier,
    /// Sum of the selected codewords.
    pub quantized: Vec<f64>,
}

/// Graph-level output of the tokenizer for a batch of items.
#[derive(Clone, Debug)]
pub struct TokenizerForward {
    pub latent: Var,
    /// `v_l` for every level, n×d_c each.
    pub residuals: Vec<Var>,
    pub final_residual: Var,
    /// `P(k | v_l)` for every level, n×K each.
    pub probs: Vec<Var>,
    /// `codes[l][i]` is item i's code at level l.
    pub codes: Vec<Vec<usize>>,
    /// Selected codewords `e_l^{c_l}`, n×d_c each.
    pub selected: Vec<Var>,
    pub quantized: Var,
}

impl TokenizerForward {
    pub fn identifier(&self, item: usize) -> ItemIdentifier {
        ItemIdentifier(self.codes.iter().map(|c| c[item]).collect())
    }
}

/// Identifiers for a whole catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogTokens {
    pub identifiers: Vec<ItemIdentifier>,
    /// Identifiers shared by more than one item, with the items sharing them.
    pub collisions: BTreeMap<ItemIdentifier, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn row_argmin(t: &Tensor) -> Vec<usize> {
    let (r, _) = t.dims2();
    (0..r)
        .map(|i| {
            let mut best = 0;
            for (j, &d) in t.row(i).iter().enumerate() {
                if d < t.row(i)[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `P(k|v) = softmax_k(−‖v − e_k‖²)` for a single residual.
pub fn assignment_distribution(v: &[f64], codebook: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vv = g.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
    let cb = g.constant(codebook.clone());
    let d = g.sq_dist(vv, cb)?;
    let nd = g.neg(d);
    let p = g.softmax_rows(nd);
    Ok(g.value(p).data().to_vec())
}

fn codebook_name(level: usize) -> String {
    format!("codebook.{level}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqTokenizer {
    pub config: TokenizerConfig,
    pub params: ParameterSet,
}

impl RqTokenizer {
    pub fn new(config: TokenizerConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut enc = alloc::vec![config.input_dim];
        enc.extend(&config.encoder_hidden);
        enc.push(config.code_dim);
        nn::init_mlp(&mut params, rng, "encoder", &enc)?;
        let mut dec = alloc::vec![config.code_dim];
        dec.extend(&config.decoder_hidden);
        dec.push(config.input_dim);
        nn::init_mlp(&mut params, rng, "decoder", &dec)?;
        let std = 1.0 / libm::sqrt(config.code_dim as f64);
        for l in 0..config.levels {
            params.insert(codebook_name(l), nn::normal(rng, &[config.codebook_size, config.code_dim], std))?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a tokenizer from stored tensors, checking names and shapes.
    pub fn from_params(config: TokenizerConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::new(config.clone(), &mut nn::seeded(0))?;
        if reference.params.names().ne(params.names()) {
            return Err(Error::data("tokenizer checkpoint tensors do not match the configuration"));
        }
        for (name, p) in reference.params.iter() {
            if params.value(name)?.shape() != p.value.shape() {
                return Err(Error::data(format!("tokenizer tensor `{name}` has the wrong shape")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn codebook(&self, level: usize) -> Result<&Tensor> {
        self.params.value(&codebook_name(level))
    }

    fn check_width(&self, z: &[f64], want: usize, what: &'static str) -> Result<()> {
        if z.len() != want {
            return Err(Error::Shape { op: what, node: None, detail: format!("width {} but expected {}", z.len(), want) });
        }
        Ok(())
    }

    fn embeddings_matrix(&self, batch: &[Vec<f64>]) -> Result<Tensor> {
        for z in batch {
            self.check_width(z, self.config.input_dim, "tokenizer input")?;
        }
        Tensor::from_rows(batch)
    }

    /// Encoder pass on a graph: n×d_in → n×d_c.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        nn::mlp(g, p, "encoder", self.config.encoder_layers(), z)
    }

    /// Decoder pass on a graph: n×d_c → n×d_in.
    pub fn reconstruct_graph(&self, g: &mut Graph, p: &Bound, q: Var) -> Result<Var> {
        nn::mlp(g, p, "decoder", self.config.decoder_layers(), q)
    }

    /// Full encode → residual quantization pass on a graph.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<TokenizerForward> {
        let latent = self.encode_graph(g, p, z)?;
        let mut v = latent;
        let levels = self.config.levels;
        let (mut residuals, mut probs, mut codes, mut selected) =
            (Vec::with_capacity(levels), Vec::with_capacity(levels), Vec::with_capacity(levels), Vec::with_capacity(levels));
        for l in 0..levels {
            let cb = p.var(&codebook_name(l))?;
            let d = g.sq_dist(v, cb)?;
            let nd = g.neg(d);
            let pr = g.softmax_rows(nd);
            // argmax of P is the nearest codeword; ties go to the lowest index
            let c = row_argmin(g.value(d));
            let e = g.gather_rows(cb, &c)?;
            residuals.push(v);
            probs.push(pr);
            codes.push(c);
            selected.push(e);
            v = g.sub(v, e)?;
        }
        let quantized = g.add_all(&selected)?;
        Ok(TokenizerForward { latent, residuals, final_residual: v, probs, codes, selected, quantized })
    }

    /// Reconstruction error plus codebook and commitment terms, summed over items.
    pub fn tokenization_loss_graph(&self, g: &mut Graph, p: &Bound, z: Var, fwd: &TokenizerForward) -> Result<Var> {
        let recon = self.reconstruct_graph(g, p, fwd.quantized)?;
        let diff = g.sub(recon, z)?;
        let sq = g.mul(diff, diff)?;
        let mut terms = alloc::vec![g.sum(sq)];
        for (&v, &e) in fwd.residuals.iter().zip(&fwd.selected) {
            let sv = g.stop_gradient(v);
            let d1 = g.sub(sv, e)?;
            let s1 = g.mul(d1, d1)?;
            terms.push(g.sum(s1));
            let se = g.stop_gradient(e);
            let d2 = g.sub(v, se)?;
            let s2 = g.mul(d2, d2)?;
            let t2 = g.sum(s2);
            terms.push(g.scale(t2, self.config.beta));
        }
        g.add_all(&terms)
    }

    /// Tokenization loss of a batch of embeddings, as a graph rooted at the returned var.
    pub fn tokenization_loss(&self, g: &mut Graph, p: &Bound, batch: &[Vec<f64>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("tokenization batch"));
        }
        let z = g.constant(self.embeddings_matrix(batch)?);
        let fwd = self.forward(g, p, z)?;
        self.tokenization_loss_graph(g, p, z, &fwd)
    }

    /// Value of the tokenization loss.
    pub fn tokenization_loss_value(&self, batch: &[Vec<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = self.tokenization_loss(&mut g, &p, batch)?;
        Ok(g.value(l).item())
    }

    pub fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_width(z, self.config.input_dim, "encode")?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let r = self.encode_graph(&mut g, &p, zv)?;
        Ok(g.value(r).data().to_vec())
    }

    pub fn reconstruct(&self, quantized: &[f64]) -> Result<Vec<f64>> {
        self.check_width(quantized, self.config.code_dim, "reconstruct")?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let q = g.constant(Tensor::matrix(1, quantized.len(), quantized.to_vec())?);
        let z = self.reconstruct_graph(&mut g, &p, q)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Residual quantization of one latent vector.
    pub fn quantize(&self, r: &[f64]) -> Result<QuantizationTrace> {
        self.check_width(r, self.config.code_dim, "quantize")?;
        let mut residuals = Vec::new();
        let mut probs = Vec::new();
        let mut ids = Vec::new();
        let mut quantized = alloc::vec![0.0; r.len()];
        let mut v = r.to_vec();
        for l in 0..self.config.levels {
            let cb = self.codebook(l)?;
            let p = assignment_distribution(&v, cb)?;
            let dists: Vec<f64> = (0..cb.dims2().0).map(|k| crate::kmeans::sq_dist(&v, cb.row(k))).collect();
            let c = row_argmin(&Tensor::matrix(1, dists.len(), dists)?)[0];
            let e = cb.row(c);
            for (q, x) in quantized.iter_mut().zip(e) {
                *q += x;
            }
            let next: Vec<f64> = v.iter().zip(e).map(|(a, b)| a - b).collect();
            residuals.push(core::mem::replace(&mut v, next));
            probs.push(p);
            ids.push(c);
        }
        Ok(QuantizationTrace { residuals, final_residual: v, probs, identifier: ItemIdentifier(ids), quantized })
    }

    /// Identifiers for every embedding, plus groups of items that share one.
    pub fn tokenize_catalog(&self, embeddings: &[Vec<f64>]) -> Result<CatalogTokens> {
        if embeddings.is_empty() {
            return Ok(CatalogTokens { identifiers: Vec::new(), collisions: BTreeMap::new() });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(self.embeddings_matrix(embeddings)?);
        let fwd = self.forward(&mut g, &p, z)?;
        let identifiers: Vec<ItemIdentifier> = (0..embeddings.len()).map(|i| fwd.identifier(i)).collect();
        let mut groups: BTreeMap<ItemIdentifier, Vec<usize>> = BTreeMap::new();
        for (i, id) in identifiers.iter().enumerate() {
            groups.entry(id.clone()).or_default().push(i);
        }
        groups.retain(|_, items| items.len() > 1);
        Ok(CatalogTokens { identifiers, collisions: groups })
    }

    /// Initializes every codebook with k-means over the residuals that reach it.
    pub fn kmeans_init(&mut self, embeddings: &[Vec<f64>], cfg: &KMeansConfig, rng: &mut SeededRng) -> Result<()> {
        if embeddings.len() < self.config.codebook_size {
            return Err(Error::data(format!(
                "k-means initialization needs at least K={} items, got {}",
                self.config.codebook_size,
                embeddings.len()
            )));
        }
        let mut residuals: Vec<Vec<f64>> = embeddings.iter().map(|z| self.encode(z)).collect::<Result<_>>()?;
        for l in 0..self.config.levels {
            let km = kmeans(&residuals, self.config.codebook_size, cfg, rng)?;
            let flat: Vec<f64> = km.centroids.iter().flatten().copied().collect();
            self.params.set_value(&codebook_name(l), Tensor::matrix(self.config.codebook_size, self.config.code_dim, flat)?)?;
            for (v, &a) in residuals.iter_mut().zip(&km.assignments) {
                for (x, c) in v.iter_mut().zip(&km.centroids[a]) {
                    *x -= c;
                }
            }
        }
        Ok(())
    }

    /// Gradient descent on the tokenization loss. Returns the mean per-item
    /// loss of every epoch; `on_epoch` sees `(epoch, loss)` as they finish.
    pub fn pretrain(
        &mut self,
        embeddings: &[Vec<f64>],
        cfg: &PretrainConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Err(Error::Empty("pretraining corpus"));
        }
        let mut rng = nn::seeded(cfg.seed);
        let mut opt = Optimizer::adamw(cfg.lr, cfg.weight_decay);
        let mut order: Vec<usize> = (0..embeddings.len()).collect();
        let bs = cfg.batch_size.max(1);
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(bs) {
                let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| embeddings[i].clone()).collect();
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let loss = self.tokenization_loss(&mut g, &p, &batch)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("tokenization loss became {value} at epoch {epoch}")));
                }
                total += value;
                let grads = g.gradients(loss, &p)?;
                opt.step(&mut self.params, &grads)?;
            }
            let mean = total / embeddings.len() as f64;
            curve.push(mean);
            on_epoch(epoch, mean);
        }
        Ok(curve)
    }
}
