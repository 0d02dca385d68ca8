//! Per-source marginal models: link, working-correlation basis, extended
//! score and the quadratic inference function each worker minimizes locally.

mod basis;
mod data;
mod fit;
mod link;
mod score;

pub use basis::{BasisFamily, BasisSet};
pub use data::{CohortData, Participant, SourceData};
pub use fit::{fit_source, independence_glm, SolverControl, SourceFit};
pub use link::LinkFunction;
pub use score::{extended_score, moment_covariance, qif_objective, sensitivity, QifValue, ScoreEval, MEAN_GUARD};
