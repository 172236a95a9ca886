//! Quality assessment of manufactured-part images with vision-language
//! models, steered by in-context examples drawn from an annotated sample
//! database.

pub mod analysis;
pub mod embedding;
pub mod hashing;
pub mod metrics;
pub mod prompt;
pub mod review_service;
pub mod sample_store;
pub mod sampler;
pub mod transport;
pub mod vlm_gateway;
pub mod cli;
