pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod phylo;
pub mod tensor;
pub mod training;
