//! Natural-language descriptions for hidden neurons of vision networks.
//!
//! The pipeline has three steps: augment the probing set with attention
//! crops of highly activating images ([`crop`]), caption the top activating
//! images and summarize the captions into candidate concepts ([`concepts`]),
//! then pick the candidate whose generated images drive the neuron hardest
//! ([`selection`]). [`evaluation`] and [`analysis`] cover scoring descriptions
//! against references and the post-hoc analyses; [`pipeline`] ties it all
//! into resumable batch runs.

pub mod activation;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod raster;

pub use error::{Error, Result};
pub use exec::Exec;
pub mod backends;
pub mod prompts;
pub mod text;
pub mod crop;
pub mod concepts;
pub mod selection;
pub mod evaluation;
pub mod analysis;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod tools;
