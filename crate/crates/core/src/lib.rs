//! Streaming test-time adaptation for subject-independent EEG drowsiness
//! classification.
//!
//! A pretrained EEGNet-style network is adapted online, one segment at a
//! time: only the batch-norm scale and shift are trained, against an
//! entropy plus energy-margin objective evaluated over a small memory bank,
//! and predictions come from class prototypes refreshed from that bank.

pub mod adapter;
pub mod data;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod prototypes;
pub mod nn;
