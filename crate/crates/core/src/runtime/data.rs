//! Row-level source files: one CSV per source with columns `id, y, x1..xp`.
//! Consecutive rows sharing an id form one participant; participants must
//! appear in the same order in every block file of a cohort.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{JobConfig, Mode, PartitionSpec, SourceSpec, JOB_FORMAT_VERSION};
use crate::combine::IntegrateOptions;
use crate::error::{QifError, Result};
use crate::model::{BasisSet, CohortData, Participant, SolverControl, SourceData};
use crate::simgen::{generate, SimDesign};

/// Reads one source file. Returns the participant ids alongside the data.
pub fn read_source_csv(spec: &SourceSpec) -> Result<(Vec<String>, SourceData)> {
    let path = &spec.path;
    let fmt = |line: u64, msg: String| QifError::Config(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| QifError::Config(format!("{}: {e}", path.display())))?;
    let width = reader.headers().map_err(|e| fmt(1, e.to_string()))?.len();
    if width < 3 {
        return Err(fmt(1, "expected columns id, y, x1[, x2, ...]".into()));
    }
    let p = width - 2;
    let mut ids: Vec<String> = Vec::new();
    let mut parts = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let flush = |ys: &mut Vec<f64>, xs: &mut Vec<f64>, parts: &mut Vec<Participant>| {
        if !ys.is_empty() {
            let m = ys.len();
            parts.push(Participant::new(DVector::from_vec(std::mem::take(ys)), DMatrix::from_row_slice(m, p, xs)));
            xs.clear();
        }
    };
    for rec in reader.records() {
        let rec = rec.map_err(|e| QifError::Config(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(fmt(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let id = &rec[0];
        if ids.last().map(String::as_str) != Some(id) {
            if ids.iter().any(|seen| seen == id) {
                return Err(fmt(line, format!("rows of participant {id} are not contiguous")));
            }
            flush(&mut ys, &mut xs, &mut parts);
            ids.push(id.to_string());
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| fmt(line, format!("field {} is not a number", i + 1)));
        ys.push(num(1)?);
        for c in 0..p {
            xs.push(num(c + 2)?);
        }
    }
    flush(&mut ys, &mut xs, &mut parts);
    if parts.is_empty() {
        return Err(fmt(1, "no data rows".into()));
    }
    let data = SourceData::new(parts, spec.link, BasisSet::new(spec.basis))?;
    Ok((ids, data))
}

/// Reads every block of one cohort and checks that participants line up.
pub fn read_cohort(cohort: u32, specs: &[&SourceSpec]) -> Result<CohortData> {
    let mut blocks = Vec::with_capacity(specs.len());
    let mut reference: Option<(u32, Vec<String>)> = None;
    for spec in specs {
        let (ids, data) = read_source_csv(spec)?;
        match &reference {
            Some((j, r)) if *r != ids => {
                return Err(QifError::Config(format!(
                    "cohort {cohort}: blocks {j} and {} list different participants (same ids, same order required)",
                    spec.block
                )))
            }
            Some(_) => {}
            None => reference = Some((spec.block, ids)),
        }
        blocks.push((spec.block, data));
    }
    CohortData::new(cohort, blocks)
}

/// Writes a source in the layout read by [`read_source_csv`]. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_source_csv(path: impl AsRef<Path>, data: &SourceData) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| QifError::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["id".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|c| format!("x{c}")));
    w.write_record(&header).map_err(err)?;
    for (i, part) in data.participants().iter().enumerate() {
        let id = format!("{}", i + 1);
        for r in 0..part.m() {
            let mut row = vec![id.clone(), part.y[r].to_string()];
            row.extend(part.x.row(r).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| QifError::io(path, e))
}

/// Writes replication `rep` of a simulation design as one CSV per source
/// plus a `job.toml` over them (relative paths), and returns the loaded job.
pub fn export_replication(design: &SimDesign, rep: usize, dir: &Path, second_round: bool) -> Result<JobConfig> {
    std::fs::create_dir_all(dir).map_err(|e| QifError::io(dir, e))?;
    let cohorts = generate(design, rep)?;
    let mut sources = Vec::new();
    for c in &cohorts {
        for (j, data) in &c.blocks {
            let name = format!("b{j}_c{}.csv", c.cohort_id);
            write_source_csv(dir.join(&name), data)?;
            sources.push(SourceSpec {
                block: *j,
                cohort: c.cohort_id,
                path: name.into(),
                link: design.link,
                basis: design.working,
            });
        }
    }
    let cfg = JobConfig {
        format_version: JOB_FORMAT_VERSION,
        mode: Mode::Monolithic,
        cohort: None,
        sources,
        partition: PartitionSpec {
            name: Some("design".into()),
            block_groups: design.groups.clone(),
            source_groups: None,
            labels: None,
        },
        candidates: Vec::new(),
        solver: SolverControl::default(),
        integrate: IntegrateOptions::default(),
        output: "out".into(),
        second_round,
        plot_data: false,
    };
    let path = dir.join("job.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| QifError::io(&path, e))?;
    let mut loaded = JobConfig::load(&path)?;
    loaded.output = dir.join("out");
    Ok(loaded)
}
