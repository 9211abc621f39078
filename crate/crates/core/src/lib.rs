//! Core library of the flowrag toolkit.
//!
//! The crate is organized along the data path: [`corpus`] defines the
//! workflow/element domain model and its document format, [`synth`] generates
//! seeded synthetic corpora, [`dataset`] turns corpora into instruction-pair
//! datasets, [`encoder`] trains and applies the hashed n-gram dual encoder,
//! [`retrieval`] provides the BM25 and dense engines, and [`eval`] computes
//! retrieval metrics and runs the comparison protocols.

pub mod corpus;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod retrieval;
pub mod hash;
pub mod rng;
pub mod synth;
pub mod text;
