//! Bi-level training of an item tokenizer and a generative recommender.
//!
//! The crate is `no_std` and only needs `alloc`. It contains the numerical
//! engine ([`autodiff`]), the residual-quantization tokenizer
//! ([`tokenizer`]), the encoder-decoder recommender ([`recommender`]),
//! trie-constrained decoding ([`trie`]), the alternating meta-gradient
//! trainer ([`trainer`]), dataset preparation ([`data`]) and ranking
//! metrics ([`metrics`]). File formats and the command line live in the
//! `genrec` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod recommender;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod trie;

pub use error::{Error, Result};
pub use tensor::Tensor;
