//! Curation and evaluation toolkit for social-platform user logs.
//!
//! The pipeline ingests per-source record dumps (reddit, twitter, blogger,
//! amazon), applies rule-based filtering, rewrites and scores text through an
//! LLM gateway, synthesizes user dossiers / scenarios / social-QA artifacts,
//! gates them with judge-model quality control, and assembles six supervised
//! training tasks in ShareGPT conversation format together with
//! multiple-choice evaluation sets. Checkpoint weight merging and agreement
//! statistics round out the toolkit.
//!
//! Every stage is deterministic under the mock gateway backend: identical
//! inputs, configuration, and seed produce byte-identical outputs.

pub mod agreement;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gateway;
pub mod jsonl;
pub mod kcore;
pub mod kvblock;
pub mod merge;
pub mod pipeline;
pub mod qc;
pub mod record;
pub mod seeding;
pub mod synthesis;
pub mod tasks;
pub mod templates;
pub mod testkit;

pub use error::{Error, Result};
