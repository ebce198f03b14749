//! JSON checkpoints: a configuration plus every named tensor.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so save → load reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use genrec_core::autodiff::ParameterSet;
use genrec_core::recommender::{Recommender, RecommenderConfig, Vocabulary};
use genrec_core::tokenizer::{RqTokenizer, TokenizerConfig};
use genrec_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_text, write_text};

const FORMAT: &str = "genrec-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Body {
    Tokenizer { config: TokenizerConfig },
    Recommender { config: RecommenderConfig, vocab: Vocabulary },
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: Body,
    tensors: BTreeMap<String, StoredTensor>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn dump(params: &ParameterSet) -> Result<BTreeMap<String, StoredTensor>> {
    params
        .iter()
        .map(|(name, p)| {
            if !p.value.is_finite() {
                return Err(Error::Config(format!("tensor `{name}` holds non-finite values and cannot be saved")));
            }
            Ok((name.to_string(), StoredTensor { shape: p.value.shape().to_vec(), data: p.value.data().to_vec() }))
        })
        .collect()
}

fn restore(path: &Path, tensors: BTreeMap<String, StoredTensor>) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    for (name, t) in tensors {
        let value = Tensor::new(t.shape, t.data).map_err(|e| bad(path, format!("tensor `{name}`: {e}")))?;
        params.insert(name, value)?;
    }
    Ok(params)
}

fn write(path: &Path, file: &File) -> Result<()> {
    let text = serde_json::to_string(file).map_err(|e| bad(path, e.to_string()))?;
    write_text(path, &text)
}

fn read(path: &Path) -> Result<File> {
    let file: File = serde_json::from_str(&read_text(path)?).map_err(|e| bad(path, e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(bad(path, format!("unsupported format `{}` version {}", file.format, file.version)));
    }
    Ok(file)
}

pub fn save_tokenizer(path: &Path, tok: &RqTokenizer) -> Result<()> {
    let body = Body::Tokenizer { config: tok.config.clone() };
    write(path, &File { format: FORMAT.into(), version: VERSION, body, tensors: dump(&tok.params)? })
}

pub fn load_tokenizer(path: &Path) -> Result<RqTokenizer> {
    let file = read(path)?;
    let Body::Tokenizer { config } = file.body else {
        return Err(bad(path, "not a tokenizer checkpoint"));
    };
    let params = restore(path, file.tensors)?;
    RqTokenizer::from_params(config, params).map_err(|e| bad(path, e.to_string()))
}

pub fn save_recommender(path: &Path, rec: &Recommender) -> Result<()> {
    let body = Body::Recommender { config: rec.config.clone(), vocab: rec.vocab };
    write(path, &File { format: FORMAT.into(), version: VERSION, body, tensors: dump(&rec.params)? })
}

pub fn load_recommender(path: &Path) -> Result<Recommender> {
    let file = read(path)?;
    let Body::Recommender { config, vocab } = file.body else {
        return Err(bad(path, "not a recommender checkpoint"));
    };
    let params = restore(path, file.tensors)?;
    Recommender::from_params(config, vocab, params).map_err(|e| bad(path, e.to_string()))
}
