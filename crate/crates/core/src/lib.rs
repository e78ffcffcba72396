//! Ordinal severity classification for short social-media posts.
//!
//! The pipeline encodes a post hierarchically (contextual unigrams via a
//! BiLSTM, multi-head self-attention, then bigram convolution), retrieves a
//! post-specific subgraph from a mental-health knowledge graph, encodes it
//! with edge-aware message passing, and fuses the two streams with
//! cross-attention. Severity is predicted with an ordinal soft-label loss and
//! evaluated with graded precision/recall/F1. Retained attention weights
//! drive token/bigram saliency export as JSON or standalone HTML.
//!
//! Module map:
//! - [`corpus`]: tokenization, JSONL loading, stratified splits, padding and
//!   masking, and a synthetic labeled corpus generator.
//! - [`embeddings`]: 300-d static token vectors (file-backed or hashed
//!   subword fallback).
//! - [`kg`]: knowledge-graph storage, clinical-relevance filtering, relation
//!   normalization, post-specific retrieval, serialization.
//! - [`encoder`]: BiLSTM, masked multi-head unigram attention, bigram
//!   convolution.
//! - [`kg_encoder`]: residual edge-aware message passing over retrieved
//!   subgraphs.
//! - [`fusion`]: cross-attention, masked mean pooling, classifier, ordinal
//!   soft labels and loss.
//! - [`metrics`]: graded ordinal counts and GP/GR/GF.
//! - [`model`]: the assembled forward pipeline for ablation variants A0-A5.
//! - [`harness`]: training loop, ablation runner, config sweep,
//!   checkpointing.
//! - [`explain`]: saliency extraction and HTML/JSON export.

pub mod autodiff;
pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod harness;
pub mod kg;
pub mod kg_encoder;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
