//! Knowledge-prompted few-shot action recognition.
//!
//! The pipeline has four stages:
//!
//! 1. [`kb`] builds a knowledge base of textual action proposals from
//!    sentence templates (filtered by a masked-token scorer) and from
//!    phrases that [`tpn`] extracts out of instruction-video captions.
//! 2. [`encoder`] embeds proposals and video frames with a dual encoder and
//!    turns them into frame-by-proposal matching scores.
//! 3. [`semantics`] samples frames, builds the per-video score matrix and
//!    keeps it in a checksummed on-disk cache.
//! 4. [`tmn`] classifies score sequences with a small temporal network built
//!    on [`nn`], and [`fewshot`] evaluates it on N-way K-shot episodes.

pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod kb;
pub mod nn;
pub mod pipeline;
pub mod semantics;
pub mod synthetic;
pub mod text;
pub mod tmn;
pub mod tpn;

pub use error::{Error, Result};
