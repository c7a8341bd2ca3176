//! Implicit probability densities over the rotation group SO(3).
//!
//! A small MLP scores (descriptor, rotation) pairs; normalizing its
//! exponentiated output over an equivolumetric grid gives a density that can
//! represent symmetric, multi-modal and continuous-orbit uncertainty.

pub mod bench;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod rotation;
pub mod so3grid;
pub mod symsol;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use infer::{evaluate_distribution, extract_modes, predict_pose, PoseDistribution};
pub use model::{ImplicitDensityModel, ModelConfig};
pub use rotation::{geodesic_distance, Rotation};
pub use so3grid::{generate_grid, EquivolumetricGrid};
