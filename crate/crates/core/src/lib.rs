//! Abstractive summarization with learned dynamic self-attention masks.
//!
//! A single shared transformer performs seq2seq summarization under an
//! additive attention mask. An advantage actor-critic agent reads the
//! model's attention scores and decides, per source token, whether the rest
//! of the network may attend to it; the episode reward is the ROUGE score of
//! the greedily decoded summary. A TextRank extractive baseline and the
//! evaluation protocol round out the pipeline.

pub mod agent;
pub mod corpus;
pub mod numerics;
pub mod pipeline;
pub mod rouge;
pub mod textrank;
pub mod tokenizer;
pub mod transformer;
