//! Generation metrics, fingerprint similarity, latent-space exploration and
//! property optimization.

mod explore;
mod fingerprint;
mod metrics;
mod property;
mod runs;

pub use explore::{grid_latents, grid_neighborhood, grid_steps, heatmap_csv, interpolate, orthonormal_pair, similarity_to};
pub use fingerprint::{fingerprint, fingerprint_with, tanimoto, Fingerprint, DEFAULT_RADIUS, DEFAULT_WIDTH};
pub use metrics::{metrics, Fraction, MetricsReport};
pub use property::{
    ascend, constrained_optimize, optimize_property, select_best, AscentStep, Candidate, ConstrainedResult, FnScore,
    LatentScore, Property, PropertyRegressor, RegressorConfig, TrajectoryPoint, DELTA_GRID, REGRESSOR_HIDDEN,
};
pub use runs::{generate_to_dir, reconstruct_count, smiles_line, GenerateOptions};
