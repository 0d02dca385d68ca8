//! Worker and coordinator steps of the file-based protocol.
//!
//! Round 1: every worker fits its cohort and sends a summary. The coordinator
//! integrates. Round 2 (optional): the coordinator sends θ̂ for each
//! partition, workers return their scores at θ̂, and the coordinator computes
//! `Q_N`. There is no third round.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{JobConfig, Mode};
use super::data::read_cohort;
use super::report::{coefficient_rows, source_row, CandidateRow, NestedRow, Report, REPORT_FORMAT_VERSION};
use super::wire::{read_message, write_message, Encoding, Payload, ThetaRequest};
use crate::combine::{integrate, CohortSummary, IntegratedResult, Partition};
use crate::error::{QifError, Result};
use crate::inference::{compare_bic, nested_test, q_statistic, CohortScores, FitStatistic, SourceScore};
use crate::model::{extended_score, CohortData};

pub fn summary_path(dir: &Path, cohort: u32) -> PathBuf {
    dir.join(format!("cohort-{cohort}.summary.qifm"))
}

pub fn request_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("request-{index}.qifm"))
}

pub fn scores_path(dir: &Path, cohort: u32, index: usize) -> PathBuf {
    dir.join(format!("cohort-{cohort}.scores-{index}.qifm"))
}

pub fn load_cohort(cfg: &JobConfig, cohort: u32) -> Result<CohortData> {
    let specs = cfg.cohort_sources(cohort);
    if specs.is_empty() {
        return Err(QifError::Config(format!("no sources declared for cohort {cohort}")));
    }
    read_cohort(cohort, &specs)
}

/// Round 1 on one cohort.
pub fn worker_round1(cfg: &JobConfig, cohort: &CohortData) -> Result<CohortSummary> {
    Ok(CohortSummary::fit(cohort, &cfg.solver)?.0)
}

/// Round 2 on one cohort: scores at the requested θ̂, with the variance
/// scalars of the cohort's own round-1 summary.
pub fn worker_round2(cohort: &CohortData, summary: &CohortSummary, request: &ThetaRequest) -> Result<CohortScores> {
    if summary.cohort_id != cohort.cohort_id {
        return Err(QifError::Config(format!(
            "summary belongs to cohort {}, data to cohort {}",
            summary.cohort_id, cohort.cohort_id
        )));
    }
    let p = request.p();
    let mut sources = Vec::with_capacity(cohort.blocks.len());
    for (block, data) in &cohort.blocks {
        let src = crate::combine::SourceId::new(*block, cohort.cohort_id);
        let g = request.partition.group_of(src).ok_or(QifError::MissingSource(src))?;
        let theta = request.theta.rows(g * p, p).into_owned();
        let (_, fit) = summary.source(*block).ok_or(QifError::MissingSource(src))?;
        let psi = extended_score(data, &theta, fit.dispersion)?.psi;
        sources.push(SourceScore { block: *block, theta, psi });
    }
    Ok(CohortScores { cohort_id: cohort.cohort_id, n: cohort.n() as u64, sources })
}

/// Everything the coordinator derives from round-1 summaries.
pub struct Combined {
    /// Main partition first, then the candidates.
    pub partitions: Vec<(String, Partition)>,
    pub results: Vec<IntegratedResult>,
    pub summaries: Vec<CohortSummary>,
}

impl Combined {
    pub fn requests(&self) -> Vec<ThetaRequest> {
        self.results.iter().map(|r| ThetaRequest { partition: r.partition.clone(), theta: r.theta.clone() }).collect()
    }
}

/// Orders summaries by cohort and checks them against the job.
pub fn check_summaries(cfg: &JobConfig, mut summaries: Vec<CohortSummary>) -> Result<Vec<CohortSummary>> {
    let expected = cfg.cohort_ids();
    let list = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
    if summaries.is_empty() {
        return Err(QifError::Config(format!("no cohort summaries given; expected cohorts {}", list(&expected))));
    }
    summaries.sort_by_key(|s| s.cohort_id);
    let got: Vec<u32> = summaries.iter().map(|s| s.cohort_id).collect();
    if got != expected {
        return Err(QifError::Config(format!(
            "summaries cover cohorts {}; expected cohorts {}",
            list(&got),
            list(&expected)
        )));
    }
    for s in &summaries {
        for spec in cfg.cohort_sources(s.cohort_id) {
            let (_, src) = s.source(spec.block).ok_or_else(|| {
                QifError::Config(format!("cohort {} summary lacks block {}", s.cohort_id, spec.block))
            })?;
            if src.link != spec.link || src.basis != spec.basis {
                return Err(QifError::Config(format!(
                    "source ({},{}) was fitted with a different link or basis than the job declares",
                    spec.block, s.cohort_id
                )));
            }
        }
    }
    Ok(summaries)
}

/// Integration step of the coordinator, for the main partition and every candidate.
pub fn combine_round1(cfg: &JobConfig, summaries: Vec<CohortSummary>) -> Result<Combined> {
    let summaries = check_summaries(cfg, summaries)?;
    let mut partitions = vec![(cfg.partition.name.clone().unwrap_or_else(|| "main".into()), cfg.partition()?)];
    partitions.extend(cfg.candidate_partitions()?);
    let results =
        partitions.iter().map(|(_, p)| integrate(&summaries, p, &cfg.integrate)).collect::<Result<Vec<_>>>()?;
    Ok(Combined { partitions, results, summaries })
}

/// Builds the report; `scores[i]` holds the round-2 payloads for partition `i`.
pub fn finish(combined: &Combined, scores: Option<&[Vec<CohortScores>]>) -> Result<Report> {
    let stats: Vec<Option<FitStatistic>> = match scores {
        None => vec![None; combined.results.len()],
        Some(sc) => {
            if sc.len() != combined.results.len() {
                return Err(QifError::Inference(format!(
                    "{} score sets for {} partitions",
                    sc.len(),
                    combined.results.len()
                )));
            }
            combined.results.iter().zip(sc).map(|(r, s)| q_statistic(r, s).map(Some)).collect::<Result<_>>()?
        }
    };
    let main = &combined.results[0];
    let ranking = if scores.is_some() {
        let all: Vec<FitStatistic> = stats.iter().flatten().cloned().collect();
        let order = compare_bic(&all);
        let mut rank = vec![None; all.len()];
        for (pos, &i) in order.iter().enumerate() {
            rank[i] = Some(pos + 1);
        }
        rank
    } else {
        vec![None; combined.results.len()]
    };
    let candidates = combined
        .partitions
        .iter()
        .zip(&stats)
        .zip(&ranking)
        .map(|(((name, part), fit), rank)| CandidateRow {
            name: name.clone(),
            groups: part.group_count(),
            fit: fit.clone(),
            bic_rank: *rank,
        })
        .collect();
    let mut nested_tests = Vec::new();
    if let Some(main_stat) = &stats[0] {
        for ((name, part), stat) in combined.partitions.iter().zip(&stats).skip(1) {
            let stat = stat.as_ref().expect("second round covers all partitions");
            let main_name = &combined.partitions[0].0;
            if part.is_coarsening_of(&main.partition) && part != &main.partition {
                nested_tests.push(NestedRow {
                    fine: main_name.clone(),
                    coarse: name.clone(),
                    test: nested_test(main_stat, stat)?,
                });
            } else if main.partition.is_coarsening_of(part) && part != &main.partition {
                nested_tests.push(NestedRow {
                    fine: name.clone(),
                    coarse: main_name.clone(),
                    test: nested_test(stat, main_stat)?,
                });
            }
        }
    }
    let mut diagnostics = main.diagnostics.clone();
    for row in nested_tests.iter().filter(|r| r.test.clamped) {
        diagnostics.warnings.push(format!(
            "nested test {} vs {}: negative difference {:e} clamped to zero",
            row.fine, row.coarse, row.test.raw_difference
        ));
    }
    Ok(Report {
        format_version: REPORT_FORMAT_VERSION,
        rounds: if scores.is_some() { 2 } else { 1 },
        n_total: main.layout.n_total,
        p: main.p(),
        partition: main.partition.clone(),
        coefficients: coefficient_rows(main),
        covariance: main.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
        fit: stats[0].clone(),
        candidates,
        nested_tests,
        sources: combined
            .summaries
            .iter()
            .flat_map(|s| s.sources.iter().map(move |src| source_row(s.cohort_id, src)))
            .collect(),
        diagnostics,
    })
}

/// Both rounds in one process over in-memory data.
pub fn run_monolithic(cfg: &JobConfig) -> Result<Report> {
    let cohorts = cfg.cohort_ids().into_iter().map(|k| load_cohort(cfg, k)).collect::<Result<Vec<_>>>()?;
    let summaries = cohorts.par_iter().map(|c| worker_round1(cfg, c)).collect::<Result<Vec<_>>>()?;
    let combined = combine_round1(cfg, summaries)?;
    if !cfg.second_round {
        return finish(&combined, None);
    }
    let scores = combined
        .requests()
        .iter()
        .map(|req| {
            cohorts.iter().zip(&combined.summaries).map(|(c, s)| worker_round2(c, s, req)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    finish(&combined, Some(&scores))
}

/// Worker process, round 1: writes `cohort-<k>.summary.qifm` into `out`.
pub fn worker_round1_files(cfg: &JobConfig, cohort: u32, out: &Path, encoding: Encoding) -> Result<PathBuf> {
    let data = load_cohort(cfg, cohort)?;
    let summary = worker_round1(cfg, &data)?;
    let path = summary_path(out, cohort);
    write_message(&path, &Payload::Summary(summary), encoding)?;
    Ok(path)
}

/// Worker process, round 2: answers every request file with a scores file.
pub fn worker_round2_files(
    cfg: &JobConfig,
    cohort: u32,
    out: &Path,
    requests: &[PathBuf],
    encoding: Encoding,
) -> Result<Vec<PathBuf>> {
    let data = load_cohort(cfg, cohort)?;
    let summary = match read_message(summary_path(out, cohort))? {
        Payload::Summary(s) => s,
        _ => return Err(QifError::Format("expected the cohort's round-1 summary".into())),
    };
    let mut written = Vec::with_capacity(requests.len());
    for (i, req_path) in requests.iter().enumerate() {
        let req = match read_message(req_path)? {
            Payload::Request(r) => r,
            _ => return Err(QifError::Format(format!("{} is not a round-2 request", req_path.display()))),
        };
        let scores = worker_round2(&data, &summary, &req)?;
        let path = scores_path(out, cohort, request_index(req_path).unwrap_or(i));
        write_message(&path, &Payload::Scores(scores), encoding)?;
        written.push(path);
    }
    Ok(written)
}

fn request_index(path: &Path) -> Option<usize> {
    path.file_name()?.to_str()?.strip_prefix("request-")?.strip_suffix(".qifm")?.parse().ok()
}

/// Coordinator process. Reads summaries (and scores, when round 2 has been
/// answered) and writes either the requests or the final report.
pub struct CoordinatorOutput {
    pub report: Report,
    /// Request files written for round 2; empty once the scores are in.
    pub requests: Vec<PathBuf>,
}

pub fn coordinate_files(
    cfg: &JobConfig,
    summary_files: &[PathBuf],
    score_files: &[PathBuf],
    out: &Path,
    encoding: Encoding,
) -> Result<CoordinatorOutput> {
    let summaries = summary_files
        .iter()
        .map(|p| match read_message(p)? {
            Payload::Summary(s) => Ok(s),
            _ => Err(QifError::Format(format!("{} is not a round-1 summary", p.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_round1(cfg, summaries)?;
    if !cfg.second_round {
        return Ok(CoordinatorOutput { report: finish(&combined, None)?, requests: Vec::new() });
    }
    if score_files.is_empty() {
        let mut requests = Vec::new();
        for (i, req) in combined.requests().into_iter().enumerate() {
            let path = request_path(out, i);
            write_message(&path, &Payload::Request(req), encoding)?;
            requests.push(path);
        }
        return Ok(CoordinatorOutput { report: finish(&combined, None)?, requests });
    }
    let mut all = Vec::with_capacity(score_files.len());
    for p in score_files {
        match read_message(p)? {
            Payload::Scores(s) => all.push(s),
            _ => return Err(QifError::Format(format!("{} is not a round-2 score message", p.display()))),
        }
    }
    // assign each score payload to the partition whose θ̂ it echoes
    let mut per_partition: Vec<Vec<CohortScores>> = vec![Vec::new(); combined.results.len()];
    for s in all {
        let idx = combined.results.iter().position(|r| echoes(r, &s)).ok_or_else(|| {
            QifError::Inference(format!("scores from cohort {} match no current estimate", s.cohort_id))
        })?;
        per_partition[idx].push(s);
    }
    let report = finish(&combined, Some(&per_partition))?;
    Ok(CoordinatorOutput { report, requests: Vec::new() })
}

fn echoes(result: &IntegratedResult, scores: &CohortScores) -> bool {
    let p = result.p();
    scores.sources.iter().all(|s| {
        let src = crate::combine::SourceId::new(s.block, scores.cohort_id);
        result.partition.group_of(src).is_some_and(|g| {
            let t = result.theta.rows(g * p, p);
            s.theta.len() == p && s.theta.iter().zip(t.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    })
}

/// Writes the report and, when requested, the plot CSVs into `out`.
pub fn write_outputs(cfg: &JobConfig, report: &Report, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| QifError::io(out, e))?;
    let path = out.join("report.json");
    report.write(&path)?;
    if cfg.plot_data {
        report.write_forest_csv(out.join("coefficients.csv"))?;
        report.write_qq_csv(out.join("qq.csv"))?;
    }
    Ok(path)
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Monolithic => "monolithic",
        Mode::Coordinator => "coordinator",
        Mode::Worker => "worker",
    }
}
