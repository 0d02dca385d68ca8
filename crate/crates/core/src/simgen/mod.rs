//! Simulation designs, correlated outcome generators and Monte Carlo metrics.

mod calibration;
mod design;
mod generate;
mod study;

pub use calibration::{kolmogorov_tail, ks_test, qq_correlation, qq_points};
pub use design::{Correlation, SimDesign, SourceParams, DESIGN_FORMAT_VERSION};
pub use generate::{gen_binary, gen_gaussian, generate, latent_vector, replication_rng};
pub use study::{
    coefficient_labels, run_replication, run_study, CoefficientMetrics, MetricsReport, ReplicationRecord, StudyOptions,
    StudyOutcome, Z_975,
};
