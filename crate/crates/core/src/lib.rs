pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod image;
pub mod iqa;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod seed;
pub mod vcg;
pub mod vda;

pub use error::{Error, Result};
