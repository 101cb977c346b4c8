//! Desk-scale federated masked-autoencoder pretraining.
//!
//! Clients train a small masked autoencoder locally (optionally with
//! sharpness-aware two-pass updates), a server aggregates their weights with
//! one of several strategies, and the final rounds are averaged into a
//! stochastic-weight-averaging model. Around that loop sit a synthetic
//! non-IID corpus, evaluation by patch-error thresholds, paired significance
//! tests, cost accounting and a frozen-vs-full fine-tuning probe.

pub mod experiment;
pub mod federation;
pub mod mae;
pub mod optim;
pub mod partition;
pub mod probe;
pub mod stats;
pub mod tensor;
pub mod weights;

pub use weights::WeightVector;
