//! Geometry of isospectral density-operator evolution and its
//! disentangled-representation analogue.
//!
//! - [`linalg`]: dense complex linear algebra, density operators, spectra.
//! - [`evolution`]: exact von Neumann evolution and the uncertainty path integral.
//! - [`distance`]: variational dynamic distance between isospectral states.
//! - [`bundle`]: purification bundle, connection, horizontal lifts and gauge actions.
//! - [`twin`]: distribution-preserving latent entanglers and round-trip complexity.
//! - [`io`] and [`scenario`]: serialization and the scenario-driven front end.

pub mod bundle;
pub mod distance;
pub mod error;
pub mod evolution;
pub mod io;
pub mod linalg;
pub mod scenario;
pub mod twin;

pub use error::{Error, Result};
