//! Worker / coordinator execution over files: job configuration, source
//! data, round messages and the JSON report.

mod config;
mod data;
mod protocol;
mod report;
pub mod wire;

pub use config::{JobConfig, Mode, PartitionSpec, SourceSpec, JOB_FORMAT_VERSION};
pub use data::{export_replication, read_cohort, read_source_csv, write_source_csv};
pub use protocol::{
    check_summaries, combine_round1, coordinate_files, finish, load_cohort, mode_name, request_path, run_monolithic,
    scores_path, summary_path, worker_round1, worker_round1_files, worker_round2, worker_round2_files, write_outputs,
    Combined, CoordinatorOutput,
};
pub use report::{wald_p_value, CandidateRow, CoefficientRow, NestedRow, Report, SourceRow, REPORT_FORMAT_VERSION};
pub use wire::{Encoding, Payload, ThetaRequest};

/// Environment variable that fixes the worker thread count.
pub const THREADS_ENV: &str = "QIFMETA_THREADS";
