//! Alternating optimization of the recommender (θ) and the tokenizer (φ).
//!
//! Every step updates θ on a mini-batch. Every `M`-th step the tokenizer
//! is updated from the recommendation loss measured after a tentative,
//! never committed, plain gradient step on θ, plus the tokenization loss.
//! Conflicting gradient pairs can be projected before they are combined.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{unrolled_gradient_chunked, Bound, GradMap, Graph, UnrollMode, Var};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, SeededRng};
use crate::optim::{Optimizer, OptimizerKind};
use crate::recommender::{Dropout, Example, Recommender, TokenSource};
use crate::tensor::Tensor;
use crate::tokenizer::{ItemIdentifier, RqTokenizer};

pub const DEFAULT_LR_TOKENIZER: f64 = 1e-4;
/// Tokenizer updates per epoch when neither `period` nor `updates_per_epoch` is set.
pub const DEFAULT_UPDATES_PER_EPOCH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Meta-gradient tokenizer updates with gradient surgery.
    Bloger,
    /// Meta-gradient tokenizer updates without surgery.
    BlogerNoGs,
    /// One combined loss for both models every step.
    Joint,
    /// Combined loss with surgery on the tokenizer gradients.
    JointGs,
    /// Tokenizer frozen; plain embedding lookups.
    Fixed,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Bloger, Strategy::BlogerNoGs, Strategy::Joint, Strategy::JointGs, Strategy::Fixed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bloger => "bloger",
            Strategy::BlogerNoGs => "bloger-no-gs",
            Strategy::Joint => "joint",
            Strategy::JointGs => "joint-gs",
            Strategy::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }

    pub fn uses_surgery(self) -> bool {
        matches!(self, Strategy::Bloger | Strategy::JointGs)
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Strategy::Bloger | Strategy::BlogerNoGs)
    }

    pub fn is_joint(self) -> bool {
        matches!(self, Strategy::Joint | Strategy::JointGs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr_rec: f64,
    /// Tokenizer learning rate; must stay unset for `fixed`.
    pub lr_tok: Option<f64>,
    pub lambda: f64,
    /// Tokenizer update period `M` in steps.
    pub period: Option<usize>,
    /// Tokenizer updates per epoch; `M` is derived from the number of batches.
    pub updates_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Examples per graph when computing a batch gradient; bounds memory.
    /// 0 processes each batch on one graph.
    pub micro_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Not read from config files; drivers derive it from their own seed.
    #[serde(skip)]
    pub seed: u64,
    /// Use the current batch for both meta steps instead of drawing a second one.
    pub same_batch: bool,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub meta_gradient: UnrollMode,
    /// Ranking metrics on validation data every this many epochs; 0 disables.
    pub eval_every: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Bloger,
            lr_rec: 5e-4,
            lr_tok: None,
            lambda: 0.5,
            period: None,
            updates_per_epoch: None,
            batch_size: 256,
            micro_batch: 64,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            same_batch: false,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            meta_gradient: UnrollMode::HessianVector,
            eval_every: 1,
            beam: 20,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::config(format!("train.{name} must be a finite value >= 0 (got {v})")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("lr_rec", self.lr_rec)?;
        non_negative("lambda", self.lambda)?;
        non_negative("weight_decay", self.weight_decay)?;
        if let Some(lr) = self.lr_tok {
            if self.strategy == Strategy::Fixed {
                return Err(Error::config("train.lr_tok cannot be set with strategy `fixed` (the tokenizer is frozen)"));
            }
            non_negative("lr_tok", lr)?;
        }
        if self.period.is_some() && self.updates_per_epoch.is_some() {
            return Err(Error::config("set at most one of train.period and train.updates_per_epoch"));
        }
        if self.period == Some(0) || self.updates_per_epoch == Some(0) {
            return Err(Error::config("train.period and train.updates_per_epoch must be >= 1"));
        }
        if self.batch_size < 1 || self.patience < 1 || self.beam < 1 {
            return Err(Error::config("train.batch_size, train.patience and train.beam must be >= 1"));
        }
        Ok(())
    }

    pub fn lr_tokenizer(&self) -> f64 {
        self.lr_tok.unwrap_or(DEFAULT_LR_TOKENIZER)
    }

    /// Tokenizer update period for an epoch of `batches` steps.
    pub fn effective_period(&self, batches: usize) -> usize {
        match (self.period, self.updates_per_epoch) {
            (Some(m), _) => m,
            (None, u) => (batches / u.unwrap_or(DEFAULT_UPDATES_PER_EPOCH)).max(1),
        }
    }
}

/// Tokenizer gradients of the recommendation and tokenization losses.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub rec: GradMap,
    pub token: GradMap,
}

/// `rec` projected onto the normal plane of `token` when they conflict.
/// Returns `None` (no change) when `rec · token ≥ 0` or `token` is zero.
pub fn project_conflict(rec: &[f64], token: &[f64]) -> Option<Vec<f64>> {
    let dot: f64 = rec.iter().zip(token).map(|(a, b)| a * b).sum();
    let nn: f64 = token.iter().map(|b| b * b).sum();
    if !(dot < 0.0) || nn == 0.0 {
        return None;
    }
    let c = dot / nn;
    Some(rec.iter().zip(token).map(|(a, b)| a - c * b).collect())
}

/// Names of the tensors whose two gradients point against each other.
pub fn conflicting_groups(pair: &GradientPair) -> Vec<String> {
    pair.rec
        .iter()
        .filter(|(name, r)| pair.token.get(*name).is_some_and(|t| r.dot(t) < 0.0))
        .map(|(name, _)| name.clone())
        .collect()
}

/// Per-tensor projection of `pair.rec`; returns how many tensors were projected.
pub fn gradient_surgery(pair: &mut GradientPair) -> Result<usize> {
    let mut fired = 0;
    for (name, r) in pair.rec.iter_mut() {
        let t = pair.token.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if t.shape() != r.shape() {
            return Err(Error::Shape { op: "gradient_surgery", node: None, detail: format!("{name}: {:?} vs {:?}", r.shape(), t.shape()) });
        }
        if let Some(p) = project_conflict(r.data(), t.data()) {
            *r = Tensor::new(r.shape().to_vec(), p)?;
            fired += 1;
        }
    }
    Ok(fired)
}

/// `rec + λ·token`.
pub fn combine(pair: &GradientPair, lambda: f64) -> GradMap {
    pair.rec.iter().map(|(k, r)| (k.clone(), r.zip_map(&pair.token[k], |a, b| a + lambda * b))).collect()
}

/// What one optimization step did.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// A tentative θ update was built for a meta-gradient.
    pub tentative: bool,
    pub tokenizer_updated: bool,
    /// Tensors with a negative gradient dot product.
    pub conflicts: usize,
    pub groups: usize,
    pub projected: usize,
    pub theta_fingerprint: u64,
    pub phi_fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_rec: f64,
    pub train_loss_token: f64,
    pub val_loss_rec: f64,
    pub conflict_rate: Option<f64>,
    #[serde(rename = "recall@5")]
    pub recall_5: Option<f64>,
    #[serde(rename = "recall@10")]
    pub recall_10: Option<f64>,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: Option<f64>,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: Option<f64>,
    pub wall_time_s: f64,
    pub steps: usize,
    pub tokenizer_updates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Hooks for clocks, logging and checkpointing.
pub trait TrainObserver {
    /// Seconds on some monotonic clock.
    fn now(&mut self) -> f64 {
        0.0
    }

    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_best(&mut self, _epoch: usize, _tokenizer: &RqTokenizer, _recommender: &Recommender) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Training and validation examples over dense item ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    /// `embeddings[i]` is item `i`'s semantic embedding.
    pub embeddings: Vec<Vec<f64>>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub tokenizer: RqTokenizer,
    pub recommender: Recommender,
    pub data: TrainData,
    pub trace: Vec<StepRecord>,
    /// Record θ/φ fingerprints in the step trace (costs a pass over all parameters).
    pub fingerprints: bool,
    rec_opt: Optimizer,
    tok_opt: Optimizer,
    rng: SeededRng,
    step: usize,
    epoch: usize,
    frozen_ids: Option<Vec<ItemIdentifier>>,
}

fn unique_items(batch: &[Example]) -> Vec<usize> {
    batch
        .iter()
        .flat_map(|e| e.history.iter().chain(core::iter::once(&e.target)))
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Slices of at most `size` examples (all of them for 0) with their share of the batch.
fn micro_batches(batch: &[Example], size: usize) -> Vec<(&[Example], f64)> {
    let size = if size == 0 { batch.len().max(1) } else { size };
    let n = batch.len() as f64;
    batch.chunks(size).map(|c| (c, if c.len() == batch.len() { 1.0 } else { c.len() as f64 / n })).collect()
}

fn weighted(g: &mut Graph, loss: Var, w: f64) -> Var {
    if w == 1.0 {
        loss
    } else {
        g.scale(loss, w)
    }
}

fn accumulate(acc: &mut GradMap, grads: GradMap) {
    for (k, t) in grads {
        match acc.get_mut(&k) {
            Some(a) => *a = a.zip_map(&t, |x, y| x + y),
            None => {
                acc.insert(k, t);
            }
        }
    }
}

fn check_loss(what: &str, v: f64, step: usize) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::Divergence(format!("{what} became {v} at step {step}")));
    }
    Ok(v)
}

impl Trainer {
    pub fn new(config: TrainConfig, tokenizer: RqTokenizer, recommender: Recommender, data: TrainData) -> Result<Self> {
        config.validate()?;
        let tc = &tokenizer.config;
        if tc.levels != recommender.vocab.levels || tc.codebook_size != recommender.vocab.codebook_size {
            return Err(Error::config("tokenizer (L, K) does not match the recommender vocabulary"));
        }
        if data.embeddings.iter().any(|e| e.len() != tc.input_dim) {
            return Err(Error::data(format!("embeddings must have width {}", tc.input_dim)));
        }
        if data.train.is_empty() || data.valid.is_empty() {
            return Err(Error::data("training needs at least one training and one validation example"));
        }
        let n = data.embeddings.len();
        let t = recommender.config.max_history;
        for e in data.train.iter().chain(&data.valid) {
            if e.target >= n || e.history.iter().any(|&i| i >= n) {
                return Err(Error::data(format!("example refers to an item without an embedding ({n} embeddings)")));
            }
            if e.history.len() > t {
                return Err(Error::data(format!("example history of {} items exceeds max_history {t}", e.history.len())));
            }
        }
        let rec_opt = Optimizer::new(config.optimizer, config.lr_rec, config.weight_decay);
        let tok_opt = Optimizer::new(config.optimizer, config.lr_tokenizer(), config.weight_decay);
        let rng = nn::seeded(config.seed);
        Ok(Self {
            config,
            tokenizer,
            recommender,
            data,
            trace: Vec::new(),
            fingerprints: false,
            rec_opt,
            tok_opt,
            rng,
            step: 0,
            epoch: 0,
            frozen_ids: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.config.batch_size)
    }

    /// Identifiers of every item under the current tokenizer.
    pub fn catalog_ids(&self) -> Result<Vec<ItemIdentifier>> {
        Ok(self.tokenizer.tokenize_catalog(&self.data.embeddings)?.identifiers)
    }

    fn dropout_rate(&self) -> f64 {
        self.recommender.config.dropout
    }

    /// One optimizer update of θ with φ held fixed. Returns the batch loss.
    pub fn recommender_step(&mut self, batch: &[Example]) -> Result<f64> {
        let rate = self.dropout_rate();
        if self.config.strategy == Strategy::Fixed && self.frozen_ids.is_none() {
            self.frozen_ids = Some(self.catalog_ids()?);
        }
        let mut value = 0.0;
        let mut grads = GradMap::new();
        for (chunk, w) in micro_batches(batch, self.config.micro_batch) {
            let mut g = Graph::new();
            let theta = self.recommender.params.bind(&mut g, true);
            let loss = match &self.frozen_ids {
                Some(ids) if self.config.strategy == Strategy::Fixed => {
                    self.recommender.recommendation_loss(&mut g, &theta, chunk, TokenSource::Hard(ids), &mut Dropout::new(rate, &mut self.rng))?
                }
                _ => {
                    let phi = self.tokenizer.params.bind(&mut g, false);
                    let src = TokenSource::Mixed { tokenizer: &self.tokenizer, phi: &phi, embeddings: &self.data.embeddings };
                    self.recommender.recommendation_loss(&mut g, &theta, chunk, src, &mut Dropout::new(rate, &mut self.rng))?
                }
            };
            let loss = weighted(&mut g, loss, w);
            value += g.value(loss).item();
            accumulate(&mut grads, g.gradients(loss, &theta)?);
        }
        let value = check_loss("recommendation loss", value, self.step)?;
        self.rec_opt.step(&mut self.recommender.params, &grads)?;
        Ok(value)
    }

    /// Meta-gradient of the query loss through a tentative step on the
    /// support batch, and the tokenization-loss gradient on the query items.
    pub fn meta_gradients(&self, support: &[Example], query: &[Example]) -> Result<GradientPair> {
        let tok = &self.tokenizer;
        let rec = &self.recommender;
        let emb = &self.data.embeddings;
        let support = micro_batches(support, self.config.micro_batch);
        let query = micro_batches(query, self.config.micro_batch);
        let chunk_loss = |g: &mut Graph, phi: &Bound, theta: &Bound, (batch, w): (&[Example], f64)| {
            let src = TokenSource::Mixed { tokenizer: tok, phi, embeddings: emb };
            let l = rec.recommendation_loss(g, theta, batch, src, &mut Dropout::off())?;
            Ok(weighted(g, l, w))
        };
        let inner = |g: &mut Graph, phi: &Bound, theta: &Bound, c: usize| chunk_loss(g, phi, theta, support[c]);
        let outer = |g: &mut Graph, phi: &Bound, theta: &Bound, c: usize| chunk_loss(g, phi, theta, query[c]);
        let (m, cfg) = (query.len(), &self.config);
        let g_rec = unrolled_gradient_chunked(outer, m, inner, support.len(), &rec.params, &tok.params, cfg.lr_rec, cfg.meta_gradient)?;
        let query: Vec<Example> = query.iter().flat_map(|(c, _)| c.iter().cloned()).collect();
        let g_token = self.token_gradient(&unique_items(&query))?;
        Ok(GradientPair { rec: g_rec, token: g_token })
    }

    /// `∇_φ` of the tokenization loss over `items`.
    pub fn token_gradient(&self, items: &[usize]) -> Result<GradMap> {
        let batch: Vec<Vec<f64>> = items.iter().map(|&i| self.data.embeddings[i].clone()).collect();
        let mut g = Graph::new();
        let phi = self.tokenizer.params.bind(&mut g, true);
        let loss = self.tokenizer.tokenization_loss(&mut g, &phi, &batch)?;
        g.gradients(loss, &phi)
    }

    /// Applies the tokenizer update for a gradient pair. Returns (conflicts, projected).
    pub fn tokenizer_step(&mut self, mut pair: GradientPair) -> Result<(usize, usize)> {
        let conflicts = conflicting_groups(&pair).len();
        let projected = if self.config.strategy.uses_surgery() { gradient_surgery(&mut pair)? } else { 0 };
        let update = combine(&pair, self.config.lambda);
        self.tok_opt.step(&mut self.tokenizer.params, &update)?;
        Ok((conflicts, projected))
    }

    fn query_batch(&mut self, support: &[Example]) -> Vec<Example> {
        if self.config.same_batch {
            return support.to_vec();
        }
        let n = self.config.batch_size.min(self.data.train.len());
        self.data.train.choose_multiple(&mut self.rng, n).cloned().collect()
    }

    /// Both models from one combined loss. Returns (rec loss, conflicts, projected).
    fn joint_step(&mut self, batch: &[Example]) -> Result<(f64, usize, usize)> {
        let rate = self.dropout_rate();
        let items = unique_items(batch);
        let rows: Vec<Vec<f64>> = items.iter().map(|&i| self.data.embeddings[i].clone()).collect();
        let mut value = 0.0;
        let (mut theta_grads, mut phi_grads) = (GradMap::new(), GradMap::new());
        for (chunk, w) in micro_batches(batch, self.config.micro_batch) {
            let mut g = Graph::new();
            let phi = self.tokenizer.params.bind(&mut g, true);
            let theta = self.recommender.params.bind(&mut g, true);
            let src = TokenSource::Mixed { tokenizer: &self.tokenizer, phi: &phi, embeddings: &self.data.embeddings };
            let l_rec = self.recommender.recommendation_loss(&mut g, &theta, chunk, src, &mut Dropout::new(rate, &mut self.rng))?;
            let l_rec = weighted(&mut g, l_rec, w);
            value += g.value(l_rec).item();
            let mut grads = g.gradients_multi(l_rec, &[&theta, &phi])?.into_iter();
            accumulate(&mut theta_grads, grads.next().unwrap_or_default());
            accumulate(&mut phi_grads, grads.next().unwrap_or_default());
        }
        let value = check_loss("recommendation loss", value, self.step)?;
        let mut g = Graph::new();
        let phi = self.tokenizer.params.bind(&mut g, true);
        let l_tok = self.tokenizer.tokenization_loss(&mut g, &phi, &rows)?;
        check_loss("tokenization loss", g.value(l_tok).item(), self.step)?;
        let token = g.gradients(l_tok, &phi)?;
        let pair = GradientPair { rec: phi_grads, token };
        self.rec_opt.step(&mut self.recommender.params, &theta_grads)?;
        let (c, p) = self.tokenizer_step(pair)?;
        Ok((value, c, p))
    }

    /// One training step on `batch`.
    pub fn step(&mut self, batch: &[Example]) -> Result<(f64, StepRecord)> {
        self.step += 1;
        let groups = self.tokenizer.params.len();
        let mut rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            tentative: false,
            tokenizer_updated: false,
            conflicts: 0,
            groups: 0,
            projected: 0,
            theta_fingerprint: 0,
            phi_fingerprint: 0,
        };
        let loss = if self.config.strategy.is_joint() {
            let (l, c, p) = self.joint_step(batch)?;
            rec.tokenizer_updated = true;
            rec.conflicts = c;
            rec.projected = p;
            rec.groups = groups;
            l
        } else {
            let l = self.recommender_step(batch)?;
            let period = self.config.effective_period(self.batches_per_epoch());
            if self.config.strategy.is_meta() && self.step.is_multiple_of(period) {
                let query = self.query_batch(batch);
                let pair = self.meta_gradients(batch, &query)?;
                let (c, p) = self.tokenizer_step(pair)?;
                rec.tentative = true;
                rec.tokenizer_updated = true;
                rec.conflicts = c;
                rec.projected = p;
                rec.groups = groups;
            }
            l
        };
        if self.fingerprints {
            rec.theta_fingerprint = self.recommender.params.fingerprint();
            rec.phi_fingerprint = self.tokenizer.params.fingerprint();
        }
        self.trace.push(rec.clone());
        Ok((loss, rec))
    }

    /// Mean recommendation loss on the validation examples with current identifiers.
    pub fn validation_loss(&self, ids: &[ItemIdentifier]) -> Result<f64> {
        let mut total = 0.0;
        let size = if self.config.micro_batch == 0 { self.config.batch_size } else { self.config.micro_batch.min(self.config.batch_size) };
        for chunk in self.data.valid.chunks(size) {
            total += self.recommender.loss_value(chunk, ids)? * chunk.len() as f64;
        }
        Ok(total / self.data.valid.len() as f64)
    }

    /// Runs one epoch over shuffled training examples. Returns
    /// (mean rec loss, conflicts, groups, tokenizer updates).
    pub fn run_epoch(&mut self) -> Result<(f64, usize, usize, usize)> {
        self.epoch += 1;
        let mut order = self.data.train.clone();
        order.shuffle(&mut self.rng);
        let (mut total, mut batches, mut conflicts, mut groups, mut updates) = (0.0, 0, 0, 0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let (l, r) = self.step(batch)?;
            total += l;
            batches += 1;
            conflicts += r.conflicts;
            groups += r.groups;
            updates += r.tokenizer_updated as usize;
        }
        Ok((total / batches as f64, conflicts, groups, updates))
    }

    /// Trains until `max_epochs` or until validation loss stops improving,
    /// then restores the best parameters.
    pub fn train(&mut self, observer: &mut impl TrainObserver) -> Result<TrainSummary> {
        let start = observer.now();
        let mut best = (0usize, f64::INFINITY);
        let mut snapshot = (self.tokenizer.params.clone(), self.recommender.params.clone());
        let mut bad = 0;
        let mut epochs = Vec::new();
        let mut stopped_early = false;
        for _ in 0..self.config.max_epochs {
            let (train_loss, conflicts, groups, updates) = self.run_epoch()?;
            let ids = self.catalog_ids()?;
            let val = check_loss("validation loss", self.validation_loss(&ids)?, self.step)?;
            let token = self.tokenizer.tokenization_loss_value(&self.data.embeddings)? / self.data.embeddings.len() as f64;
            let mut record = EpochRecord {
                epoch: self.epoch,
                train_loss_rec: train_loss,
                train_loss_token: token,
                val_loss_rec: val,
                conflict_rate: (groups > 0).then(|| conflicts as f64 / groups as f64),
                recall_5: None,
                recall_10: None,
                ndcg_5: None,
                ndcg_10: None,
                wall_time_s: 0.0,
                steps: self.step,
                tokenizer_updates: updates,
            };
            if self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every) {
                let rep = metrics::evaluate(&self.recommender, &ids, &self.data.valid, self.config.beam)?;
                record.recall_5 = Some(rep.recall_5);
                record.recall_10 = Some(rep.recall_10);
                record.ndcg_5 = Some(rep.ndcg_5);
                record.ndcg_10 = Some(rep.ndcg_10);
            }
            record.wall_time_s = observer.now() - start;
            observer.on_epoch(&record)?;
            epochs.push(record);
            if val < best.1 {
                best = (self.epoch, val);
                bad = 0;
                snapshot = (self.tokenizer.params.clone(), self.recommender.params.clone());
                observer.on_best(self.epoch, &self.tokenizer, &self.recommender)?;
            } else {
                bad += 1;
                if bad >= self.config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        self.tokenizer.params = snapshot.0;
        self.recommender.params = snapshot.1;
        Ok(TrainSummary { epochs, best_epoch: best.0, best_val_loss: best.1, stopped_early })
    }
}
