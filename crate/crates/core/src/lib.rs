//! Distributed estimation of marginal regression models with quadratic
//! inference functions, integrated across correlated data sources in a
//! single round of communication.
//!
//! Data are split into blocks of outcomes (`j`) and cohorts of participants
//! (`k`). Each source `(j, k)` is fitted locally ([`model`]), reduced to a
//! small summary, and the summaries are combined under a homogeneity
//! partition ([`combine`]). [`inference`] provides the goodness-of-fit
//! statistic, nested tests and BIC; [`simgen`] drives simulation studies and
//! [`runtime`] runs the worker / coordinator protocol.

pub mod combine;
mod error;
pub mod inference;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod runtime;
pub mod simgen;

pub use combine::{
    godambe_combine, integrate, CohortSummary, IntegrateOptions, IntegratedResult, Partition, PcaMode, SourceId,
    SourceSummary,
};
pub use error::{ErrorClass, QifError, Result};
pub use inference::{compare_bic, nested_test, q_statistic, round2_scores, CohortScores, FitStatistic, NestedTest};
pub use model::{
    fit_source, BasisFamily, BasisSet, CohortData, LinkFunction, Participant, SolverControl, SourceData, SourceFit,
};
