pub mod ergodics;
pub mod experiments;
pub mod error;
pub mod functional;
pub mod io;
pub mod model;
pub mod occupation;
pub mod path;
pub mod presets;
pub mod quadrature;
pub mod rate;
pub mod rng;
pub mod simulator;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use path::PathSpec;
pub use spectral::{Boundary, Collocation, Coupling, CovarianceSpec, EigenSystem, SpectralField};
