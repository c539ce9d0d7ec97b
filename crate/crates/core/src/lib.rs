//! Rationale-constrained counterfactual generation for text classifiers,
//! human rating collection and rating-based model risk scoring.
//!
//! The crate is organised bottom-up:
//!
//! * [`text`] holds the shared domain types (token sequences, masks,
//!   replacement steps, trails, ratings) and the pure editing helpers.
//! * [`models`] defines the assessed-classifier and fill-model contracts and
//!   ships a linear bag-of-embeddings classifier and a bigram corpus filler.
//! * [`rationale`] builds the masks that decide which tokens may be edited.
//! * [`hotflip`] and [`mlm`] propose single-token edits.
//! * [`engine`] runs the outer replace-until-flip loop.
//! * [`risk`] turns faithfulness ratings into risk scores.
//! * [`store`] ingests datasets and persists sessions, trails and ratings.

pub mod engine;
pub mod error;
pub mod hotflip;
pub mod mlm;
pub mod models;
pub mod rationale;
pub mod risk;
pub mod store;
pub mod text;

pub use error::{Error, Result};
