pub mod analysis;
pub mod cmaes;
pub mod config;
pub mod dataset;
pub mod fsutil;
pub mod latent;
pub mod oracle;
pub mod pipeline;
pub mod sampler;
pub mod simulate;
pub mod study;
