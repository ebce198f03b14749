//! Run configuration: one TOML document, overridable by `--section.key value` flags.

use std::path::{Path, PathBuf};

use genrec_core::data::SynthConfig;
use genrec_core::recommender::RecommenderConfig;
use genrec_core::tokenizer::TokenizerConfig;
use genrec_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::read_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
    /// k of the k-core filter; 5 in the standard protocol.
    pub min_interactions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { interactions: "data/interactions.tsv".into(), embeddings: "data/embeddings.txt".into(), min_interactions: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub kmeans_iters: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-3, weight_decay: 1e-4, batch_size: 1024, kmeans_iters: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Training epochs timed per strategy.
    pub epochs: usize,
    /// Evaluation passes timed per strategy.
    pub eval_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { epochs: 3, eval_repeats: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerConfig,
    pub pretrain: PretrainConfig,
    pub recommender: RecommenderConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/desk".into(),
            data: DataConfig::default(),
            synth: SynthConfig { items: 300, users: 500, clusters: 30, seq_len: 8, dim: 32, noise: 0.1, jump_prob: 0.1, ..SynthConfig::default() },
            tokenizer: TokenizerConfig::default(),
            pretrain: PretrainConfig::default(),
            recommender: RecommenderConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Independent seeds for the stages of a run.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub synth: u64,
    pub tokenizer_init: u64,
    pub kmeans: u64,
    pub pretrain: u64,
    pub recommender_init: u64,
    pub train: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            synth: s,
            tokenizer_init: s.wrapping_add(1),
            kmeans: s.wrapping_add(2),
            pretrain: s.wrapping_add(3),
            recommender_init: s.wrapping_add(4),
            train: s.wrapping_add(5),
        }
    }

    /// Checks every section. `input_dim = 0` is accepted: it is filled in
    /// from the embeddings.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let mut tok = self.tokenizer.clone();
        if tok.input_dim == 0 {
            tok.input_dim = 1;
        }
        tok.validate()?;
        self.recommender.validate()?;
        self.train.validate()?;
        let p = &self.pretrain;
        if !(p.lr.is_finite() && p.lr >= 0.0) || !(p.weight_decay.is_finite() && p.weight_decay >= 0.0) {
            return Err(Error::Config("pretrain.lr and pretrain.weight_decay must be finite and >= 0".into()));
        }
        if p.batch_size == 0 || p.kmeans_iters == 0 {
            return Err(Error::Config("pretrain.batch_size and pretrain.kmeans_iters must be >= 1".into()));
        }
        if self.data.min_interactions < 3 {
            return Err(Error::Config("data.min_interactions must be >= 3 (leave-one-out needs 3 interactions)".into()));
        }
        if self.bench.epochs == 0 || self.bench.eval_repeats == 0 {
            return Err(Error::Config("bench.epochs and bench.eval_repeats must be >= 1".into()));
        }
        Ok(())
    }

    /// Loads `path` (or the defaults) and applies `overrides` as
    /// `(dotted.key, value)` pairs. Values are read as TOML literals when
    /// possible and as strings otherwise.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = match path {
            Some(p) => read_text(p)?.parse().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_path(&mut doc, key, parse_value(value))?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for s in sections {
        let entry = table.entry(s.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{s}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Splits `--a.b value` pairs (and `--a.b=value`) out of an argument list.
/// Returns the remaining arguments and the overrides.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("`--{flag}` needs a value")))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}
