//! Variable selection for exponential-family GLMs by subsampled-lasso
//! ranking followed by permutation-calibrated forward selection, with
//! taxonomy-aware aggregation of OTU abundance columns.

pub mod app;
pub mod design;
pub mod error;
pub mod forward;
pub mod glm;
pub mod lasso;
mod linalg;
pub mod ranking;
pub mod rng;
pub mod sim;
pub mod stability;
pub mod table;
pub mod tree;

pub use design::ColumnMatrix;
pub use error::{Result, SurfError};
pub use glm::{Family, FitOptions, GaussianScale, GlmFit, GlmSpec};
