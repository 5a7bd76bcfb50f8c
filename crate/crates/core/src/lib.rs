//! Distortion-perception traversal by MAP estimation followed by re-noised
//! posterior sampling, on analytic priors where every quantity has an oracle.

pub mod assignment;
pub mod error;
pub mod latent;
pub mod linalg;
pub mod metrics;
pub mod observation;
pub mod posterior;
pub mod prior;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod solver;

pub use error::{Error, Result};
pub use schedule::Schedule;
