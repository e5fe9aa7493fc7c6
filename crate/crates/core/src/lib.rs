//! Cover times of the simple random walk on the discrete torus: simulation,
//! lattice potential theory, local interlacement sampling and quasistationary
//! spectral analysis.

pub mod error;
pub mod experiments;
pub mod interlacement;
pub mod lattice;
pub mod linalg;
pub mod output;
pub mod potential;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
pub use lattice::{BoxSpec, LocalSet, Site, SiteSet, TorusGeometry};
pub use rng::RngStream;
