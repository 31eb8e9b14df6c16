//! Evaluation toolkit for product-search ranking over ESCI-style relevance
//! judgments: dataset construction, rankers, provider-backed enrichment,
//! nDCG scoring and an experiment grid runner.

pub mod catalog;
pub mod dataset_ops;
pub mod enrichment;
pub mod fixtures;
pub mod hashing;
pub mod metrics;
pub mod par;
pub mod provider;
pub mod rankers;
pub mod runner;
