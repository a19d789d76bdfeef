//! Detecting LLM-generated text from selected-next-token-probability (SNTP)
//! sequences.
//!
//! A document is fed through frozen probability sources (tiny causal LMs or
//! n-gram models sharing one tokenizer); the per-token negative log
//! probabilities of the tokens that actually occur form a `T x k` matrix.
//! A small bidirectional Transformer encodes that matrix and a classifier
//! head scores how LLM-like the document is. The encoder can be contrastively
//! pre-trained against a frozen text encoder before fine-tuning, and an
//! evaluation harness compares the detector against perplexity-family and
//! text-classifier baselines under leave-one-domain-out splits.

pub mod encoder;
pub mod contrastive;
pub mod detectors;
pub mod corpus;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod eval;
pub mod textenc;
pub mod sntp;
pub mod lm;
pub mod tokenizer;
pub mod transformer;
pub mod tensor;

pub use error::{Result, SentraError};
