//! Analytic densities and conditioned simulation for the Kolmogorov diffusion
//! (integrated Brownian motion paired with its driving Brownian motion) and
//! for integrated random walks, killed when the integrated coordinate becomes
//! non-positive. The library computes the killed transition density along two
//! independent routes, the harmonic function of the killed process along two
//! more, and cross-validates deterministic quadrature against Monte Carlo
//! simulation at desk scale.

pub mod error;
pub mod state;
pub mod quad;
pub mod specfun;
pub mod diffusion;
pub mod density;
pub mod walk;

pub use error::{Error, Result};
pub use state::{alpha, scale_down, scale_up, RngStream, State, TimeHorizon};
