//! The work behind each subcommand. Everything here is deterministic given
//! the configuration except the wall-clock fields.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use genrec_core::data::{self, EmbeddingTable, InteractionDataset, SynthCorpus};
use genrec_core::kmeans::KMeansConfig;
use genrec_core::metrics::{self, EvalReport};
use genrec_core::nn;
use genrec_core::recommender::{Example, Recommender, Vocabulary};
use genrec_core::tokenizer::{self, ItemIdentifier, RqTokenizer, TokenizerConfig};
use genrec_core::trainer::{EpochRecord, Strategy, TrainData, TrainObserver, TrainSummary, Trainer};
use genrec_core::trie::IdentifierTrie;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{self, write_text};

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const RECOMMENDER_FILE: &str = "recommender.json";
pub const IDENTIFIERS_FILE: &str = "identifiers.tsv";

/// Default tokenizer checkpoint written by `pretrain`.
pub fn tokenizer_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(TOKENIZER_FILE)
}

/// Directory holding the logs and checkpoints of one training run.
pub fn train_dir(cfg: &RunConfig, strategy: Strategy) -> PathBuf {
    cfg.output_dir.join("train").join(strategy.name())
}

/// Filtered, split interactions with embeddings aligned to dense item ids.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub embeddings: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn from_parts(cfg: &RunConfig, raw: &data::RawInteractions, table: &EmbeddingTable) -> Result<Self> {
        let filtered = data::k_core(raw, cfg.data.min_interactions)?;
        let dataset = data::leave_one_out(&filtered, cfg.recommender.max_history)?;
        let embeddings = table.for_items(&dataset.items)?;
        Ok(Self { dataset, embeddings })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let raw = formats::load_interactions(&cfg.data.interactions)?;
        let table = formats::load_embeddings(&cfg.data.embeddings)?;
        Self::from_parts(cfg, &raw, &table)
    }

    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let corpus = synth_corpus(cfg)?;
        Self::from_parts(cfg, &corpus.interactions, &corpus.embeddings)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn train_data(&self, max_history: usize) -> TrainData {
        TrainData {
            train: self.dataset.train_examples(max_history),
            valid: self.dataset.valid_examples(max_history),
            embeddings: self.embeddings.clone(),
        }
    }
}

/// The configured tokenizer with `input_dim` taken from the data when unset.
pub fn tokenizer_config(cfg: &RunConfig, dim: usize) -> Result<TokenizerConfig> {
    let mut tc = cfg.tokenizer.clone();
    if tc.input_dim == 0 {
        tc.input_dim = dim;
    } else if tc.input_dim != dim {
        return Err(Error::Config(format!("tokenizer.input_dim = {} but the embeddings have width {dim}", tc.input_dim)));
    }
    tc.validate()?;
    Ok(tc)
}

fn kmeans_config(cfg: &RunConfig) -> KMeansConfig {
    KMeansConfig { max_iters: cfg.pretrain.kmeans_iters, ..KMeansConfig::default() }
}

/// A fresh tokenizer with k-means initialized codebooks.
pub fn initial_tokenizer(cfg: &RunConfig, embeddings: &[Vec<f64>]) -> Result<RqTokenizer> {
    let seeds = cfg.seeds();
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut tok = RqTokenizer::new(tokenizer_config(cfg, dim)?, &mut nn::seeded(seeds.tokenizer_init))?;
    tok.kmeans_init(embeddings, &kmeans_config(cfg), &mut nn::seeded(seeds.kmeans))?;
    Ok(tok)
}

pub fn synth_corpus(cfg: &RunConfig) -> Result<SynthCorpus> {
    let sc = data::SynthConfig { seed: cfg.seeds().synth, ..cfg.synth.clone() };
    Ok(data::synthesize(&sc)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthOutcome {
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
    pub users: usize,
    pub items: usize,
}

/// Writes a synthetic corpus to the configured data paths.
pub fn synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    let corpus = synth_corpus(cfg)?;
    write_text(&cfg.data.interactions, &formats::format_interactions(&corpus.interactions))?;
    write_text(&cfg.data.embeddings, &formats::format_embeddings(&corpus.embeddings))?;
    Ok(SynthOutcome {
        interactions: cfg.data.interactions.clone(),
        embeddings: cfg.data.embeddings.clone(),
        users: corpus.interactions.users.len(),
        items: corpus.embeddings.rows.len(),
    })
}

/// Line-oriented JSON log.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = File::options().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, Serialize)]
struct PretrainLine {
    epoch: usize,
    loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    /// Mean per-item tokenization loss after the last epoch (or of the
    /// initial state when no epochs ran).
    pub final_loss: f64,
    pub collisions: usize,
}

/// k-means initialization (unless resuming) followed by `pretrain.epochs`
/// epochs of tokenizer training.
pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<PretrainOutcome> {
    let prepared = Prepared::load(cfg)?;
    let path = tokenizer_path(cfg);
    let log_path = cfg.output_dir.join("pretrain_loss.jsonl");
    let (mut tok, mut log, first_epoch) = if resume {
        let tok = checkpoint::load_tokenizer(&path)?;
        if tok.config != tokenizer_config(cfg, prepared.dim())? {
            return Err(Error::Config(format!("{} was trained with a different tokenizer configuration", path.display())));
        }
        let done = std::fs::read_to_string(&log_path).map(|s| s.lines().count()).unwrap_or(0);
        (tok, JsonLines::append(&log_path)?, done)
    } else {
        (initial_tokenizer(cfg, &prepared.embeddings)?, JsonLines::create(&log_path)?, 0)
    };
    let pc = tokenizer::PretrainConfig {
        epochs: cfg.pretrain.epochs,
        lr: cfg.pretrain.lr,
        weight_decay: cfg.pretrain.weight_decay,
        batch_size: cfg.pretrain.batch_size,
        seed: cfg.seeds().pretrain.wrapping_add(first_epoch as u64),
    };
    let mut log_err = None;
    let curve = tok.pretrain(&prepared.embeddings, &pc, |epoch, loss| {
        if log_err.is_none() {
            log_err = log.write(&PretrainLine { epoch: first_epoch + epoch + 1, loss }).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    checkpoint::save_tokenizer(&path, &tok)?;
    let final_loss = match curve.last() {
        Some(&l) => l,
        None => tok.tokenization_loss_value(&prepared.embeddings)? / prepared.embeddings.len() as f64,
    };
    let collisions = tok.tokenize_catalog(&prepared.embeddings)?.collisions.values().map(Vec::len).sum();
    Ok(PretrainOutcome { checkpoint: path, epochs: first_epoch + curve.len(), final_loss, collisions })
}

/// Writes metrics and checkpoints as training proceeds.
pub struct RunObserver {
    start: Instant,
    metrics: JsonLines,
    checkpoint_dir: PathBuf,
    item_names: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    pub quiet: bool,
}

impl RunObserver {
    pub fn new(dir: &Path, prepared: &Prepared) -> Result<Self> {
        Ok(Self {
            start: Instant::now(),
            metrics: JsonLines::create(&dir.join("metrics.jsonl"))?,
            checkpoint_dir: dir.join("checkpoint"),
            item_names: prepared.dataset.items.clone(),
            embeddings: prepared.embeddings.clone(),
            quiet: false,
        })
    }
}

impl TrainObserver for RunObserver {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> genrec_core::Result<()> {
        if !self.quiet {
            eprintln!(
                "epoch {:>4}  rec {:.4}  token {:.4}  val {:.4}  recall@5 {}",
                record.epoch,
                record.train_loss_rec,
                record.train_loss_token,
                record.val_loss_rec,
                record.recall_5.map_or("-".into(), |r| format!("{r:.4}")),
            );
        }
        self.metrics.write(record).map_err(|e| genrec_core::Error::Data(e.to_string()))
    }

    fn on_best(&mut self, _epoch: usize, tok: &RqTokenizer, rec: &Recommender) -> genrec_core::Result<()> {
        let save = || -> Result<()> {
            checkpoint::save_tokenizer(&self.checkpoint_dir.join(TOKENIZER_FILE), tok)?;
            checkpoint::save_recommender(&self.checkpoint_dir.join(RECOMMENDER_FILE), rec)?;
            let ids = tok.tokenize_catalog(&self.embeddings)?.identifiers;
            let trie = IdentifierTrie::build(&ids)?;
            write_text(&self.checkpoint_dir.join(IDENTIFIERS_FILE), &trie.export_text(|i| self.item_names[i].clone()))
        };
        save().map_err(|e| match e {
            Error::Core(c) => c,
            other => genrec_core::Error::Data(other.to_string()),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub strategy: Strategy,
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Builds a trainer for `prepared`. Without a tokenizer checkpoint only
/// `fixed` may start, from k-means initialized codebooks.
pub fn build_trainer(cfg: &RunConfig, prepared: &Prepared, tokenizer: Option<&Path>) -> Result<Trainer> {
    let strategy = cfg.train.strategy;
    let tc = tokenizer_config(cfg, prepared.dim())?;
    let tok = match tokenizer {
        Some(path) => {
            let tok = checkpoint::load_tokenizer(path)?;
            if tok.config != tc {
                return Err(Error::Config(format!("{} does not match the tokenizer configuration", path.display())));
            }
            tok
        }
        None if strategy == Strategy::Fixed => initial_tokenizer(cfg, &prepared.embeddings)?,
        None => {
            return Err(Error::Config(format!("strategy `{}` needs a pretrained tokenizer checkpoint", strategy.name())));
        }
    };
    assemble(cfg, prepared, tok)
}

/// A trainer starting from `tok` with a freshly initialized recommender.
pub fn assemble(cfg: &RunConfig, prepared: &Prepared, tok: RqTokenizer) -> Result<Trainer> {
    let vocab = Vocabulary::new(tok.config.levels, tok.config.codebook_size);
    let rec = Recommender::new(cfg.recommender.clone(), vocab, &mut nn::seeded(cfg.seeds().recommender_init))?;
    let train = genrec_core::trainer::TrainConfig { seed: cfg.seeds().train, ..cfg.train.clone() };
    Ok(Trainer::new(train, tok, rec, prepared.train_data(cfg.recommender.max_history))?)
}

/// Trains with the configured strategy, writing `metrics.jsonl`,
/// `trace.jsonl`, `summary.json` and best-epoch checkpoints.
pub fn train(cfg: &RunConfig, tokenizer: Option<&Path>, quiet: bool) -> Result<TrainOutcome> {
    let prepared = Prepared::load(cfg)?;
    let default_tok = tokenizer_path(cfg);
    let tokenizer = tokenizer.map(Path::to_path_buf).or_else(|| default_tok.exists().then_some(default_tok));
    let mut trainer = build_trainer(cfg, &prepared, tokenizer.as_deref())?;
    trainer.fingerprints = true;
    let dir = train_dir(cfg, cfg.train.strategy);
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let mut observer = RunObserver::new(&dir, &prepared)?;
    observer.quiet = quiet;
    let result = trainer.train(&mut observer);
    let mut trace = JsonLines::create(&dir.join("trace.jsonl"))?;
    for r in &trainer.trace {
        trace.write(r)?;
    }
    let summary: TrainSummary = result?;
    let outcome = TrainOutcome {
        strategy: cfg.train.strategy,
        run_dir: dir.clone(),
        epochs: summary.epochs.len(),
        best_epoch: summary.best_epoch,
        best_val_loss: summary.best_val_loss,
        stopped_early: summary.stopped_early,
        steps: trainer.steps(),
    };
    write_text(&dir.join("summary.json"), &to_json(&outcome)?)?;
    Ok(outcome)
}

pub fn to_json(v: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub examples: usize,
    pub items: usize,
    /// Items sharing their identifier with another item.
    pub colliding_items: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Test-split evaluation of a checkpoint directory holding a tokenizer and
/// a recommender.
pub fn eval(cfg: &RunConfig, checkpoint_dir: &Path) -> Result<EvalOutcome> {
    let prepared = Prepared::load(cfg)?;
    let tok = checkpoint::load_tokenizer(&checkpoint_dir.join(TOKENIZER_FILE))?;
    let rec = checkpoint::load_recommender(&checkpoint_dir.join(RECOMMENDER_FILE))?;
    if tok.config != tokenizer_config(cfg, prepared.dim())? {
        return Err(Error::Config("the checkpoint tokenizer does not match the configuration".into()));
    }
    if rec.config != cfg.recommender {
        return Err(Error::Config("the checkpoint recommender does not match the configuration".into()));
    }
    if (rec.vocab.levels, rec.vocab.codebook_size) != (tok.config.levels, tok.config.codebook_size) {
        return Err(Error::Config("checkpoint tokenizer and recommender disagree on (L, K)".into()));
    }
    let tokens = tok.tokenize_catalog(&prepared.embeddings)?;
    let examples = prepared.dataset.test_examples(cfg.recommender.max_history);
    let report = metrics::evaluate(&rec, &tokens.identifiers, &examples, cfg.train.beam)?;
    let outcome = EvalOutcome {
        examples: examples.len(),
        items: tokens.identifiers.len(),
        colliding_items: tokens.collisions.values().map(Vec::len).sum(),
        report,
    };
    write_text(&checkpoint_dir.join("eval_report.json"), &to_json(&outcome)?)?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategyTiming {
    pub strategy: Strategy,
    pub epoch_times_s: Vec<f64>,
    pub median_epoch_s: f64,
    /// Constrained decoding of the validation examples, per pass.
    pub eval_times_s: Vec<f64>,
    pub median_eval_s: f64,
    pub steps: usize,
    pub tokenizer_updates: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub items: usize,
    pub train_examples: usize,
    pub fixed: StrategyTiming,
    pub bloger: StrategyTiming,
    /// Median bloger epoch time over median fixed epoch time.
    pub train_ratio: f64,
    /// Median bloger eval time over median fixed eval time.
    pub eval_ratio: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Validation examples per alternation when timing decoding.
const EVAL_SLICE: usize = 8;

struct Timed {
    trainer: Trainer,
    timing: StrategyTiming,
}

impl Timed {
    fn new(cfg: &RunConfig, prepared: &Prepared, strategy: Strategy, start: &RqTokenizer) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.train.strategy = strategy;
        cfg.train.lr_tok = None;
        let trainer = assemble(&cfg, prepared, start.clone())?;
        let timing = StrategyTiming {
            strategy,
            epoch_times_s: Vec::new(),
            median_epoch_s: f64::NAN,
            eval_times_s: Vec::new(),
            median_eval_s: f64::NAN,
            steps: 0,
            tokenizer_updates: 0,
        };
        Ok(Self { trainer, timing })
    }

    fn epoch(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let (_, _, _, u) = self.trainer.run_epoch()?;
        self.timing.epoch_times_s.push(t0.elapsed().as_secs_f64());
        self.timing.tokenizer_updates += u;
        Ok(())
    }

    /// Trie and catalog identifiers for timing constrained decoding.
    fn decoder(&self) -> Result<(Vec<ItemIdentifier>, IdentifierTrie)> {
        let ids = self.trainer.catalog_ids()?;
        let trie = IdentifierTrie::build(&ids)?;
        Ok((ids, trie))
    }

    /// Decodes `examples` and adds the elapsed time to the current eval pass.
    fn decode(&mut self, decoder: &(Vec<ItemIdentifier>, IdentifierTrie), examples: &[Example], beam: usize) -> Result<()> {
        let t0 = Instant::now();
        metrics::rank_examples(&self.trainer.recommender, &decoder.0, &decoder.1, examples, beam)?;
        if let Some(t) = self.timing.eval_times_s.last_mut() {
            *t += t0.elapsed().as_secs_f64();
        }
        Ok(())
    }

    fn finish(mut self) -> StrategyTiming {
        self.timing.median_epoch_s = median(&self.timing.epoch_times_s);
        self.timing.median_eval_s = median(&self.timing.eval_times_s);
        self.timing.steps = self.trainer.steps();
        self.timing
    }
}

/// Times `fixed` and `bloger` epochs and evaluation passes on the synthetic
/// corpus, from the same k-means initialized tokenizer and seeds. Epochs of
/// the two strategies alternate.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let prepared = Prepared::synthetic(cfg)?;
    let start = initial_tokenizer(cfg, &prepared.embeddings)?;
    let mut fixed = Timed::new(cfg, &prepared, Strategy::Fixed, &start)?;
    let mut bloger = Timed::new(cfg, &prepared, Strategy::Bloger, &start)?;
    for _ in 0..cfg.bench.epochs {
        fixed.epoch()?;
        bloger.epoch()?;
    }
    // Decoding is timed on alternating slices (fixed, bloger, bloger, fixed,
    // ...) so that load changes on the machine hit both strategies alike.
    let (fd, bd) = (fixed.decoder()?, bloger.decoder()?);
    let valid = fixed.trainer.data.valid.clone();
    for _ in 0..cfg.bench.eval_repeats {
        fixed.timing.eval_times_s.push(0.0);
        bloger.timing.eval_times_s.push(0.0);
        for (i, slice) in valid.chunks(EVAL_SLICE).enumerate() {
            if i % 2 == 0 {
                fixed.decode(&fd, slice, cfg.train.beam)?;
                bloger.decode(&bd, slice, cfg.train.beam)?;
            } else {
                bloger.decode(&bd, slice, cfg.train.beam)?;
                fixed.decode(&fd, slice, cfg.train.beam)?;
            }
        }
    }
    let (fixed, bloger) = (fixed.finish(), bloger.finish());
    Ok(BenchReport {
        items: prepared.embeddings.len(),
        train_examples: prepared.dataset.train_examples(cfg.recommender.max_history).len(),
        train_ratio: bloger.median_epoch_s / fixed.median_epoch_s,
        eval_ratio: bloger.median_eval_s / fixed.median_eval_s,
        fixed,
        bloger,
    })
}
