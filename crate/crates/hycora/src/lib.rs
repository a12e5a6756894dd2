//! HyCoRA at desk scale: a frozen byte-level transformer whose attention
//! projections carry low-rank adapters, where the role-specific A matrix is
//! generated by a lightweight hyper-network from (character, layer)
//! embeddings and the B matrix is shared across roles, trained jointly with
//! a scheduled hyper-contrastive auxiliary loss.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod hypernet;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
