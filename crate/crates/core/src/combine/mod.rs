//! One-round integration of per-source fits under a homogeneity partition.

mod godambe;
mod integrate;
mod partition;
mod pca;
mod summary;
mod system;

pub use godambe::godambe_combine;
pub use integrate::{integrate, solve_system, Diagnostics, IntegrateOptions, IntegratedResult, PcaMode, WEIGHT_RCOND};
pub use partition::{Partition, SourceId};
pub use pca::{pca_reduce, PcaReduction, DEFAULT_PCA_THRESHOLD};
pub use summary::{CohortSummary, SourceSummary, SUMMARY_FORMAT_VERSION};
pub use system::{assemble_weight, stack_sensitivities, stacked_rhs, LayoutEntry, MomentLayout, MomentSystem};
