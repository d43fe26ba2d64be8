//! Semantic-form mid-tuning at desk scale.
//!
//! A sentence encoder (E1) and a semantic-form encoder (E2) are aligned over
//! (sentence, semantic parse) pairs, either explicitly with a triplet loss or
//! implicitly with a matched/mismatched classifier. Negatives come from
//! corrupting the true parse. The mid-tuned sentence encoder is then evaluated
//! with nearest-neighbour retrieval, correlation metrics and linear probes.

pub mod corrupt;
pub mod encoder;
pub mod evalkit;
pub mod linearize;
pub mod numcore;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod semform;
pub mod train;
