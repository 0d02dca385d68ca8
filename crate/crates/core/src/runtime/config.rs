use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combine::{IntegrateOptions, Partition, SourceId};
use crate::error::{QifError, Result};
use crate::model::{BasisFamily, LinkFunction, SolverControl};

pub const JOB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Monolithic,
    Coordinator,
    Worker,
}

/// One data source: a CSV file of `id, y, x1..xp` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub block: u32,
    pub cohort: u32,
    pub path: PathBuf,
    pub link: LinkFunction,
    pub basis: BasisFamily,
}

/// A homogeneity partition, either as block groups pooled over all cohorts or
/// as explicit `[block, cohort]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub block_groups: Option<Vec<Vec<u32>>>,
    #[serde(default)]
    pub source_groups: Option<Vec<Vec<[u32; 2]>>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl PartitionSpec {
    pub fn build(&self, blocks: u32, cohorts: u32) -> Result<Partition> {
        let partition = match (&self.block_groups, &self.source_groups) {
            (Some(g), None) => Partition::from_block_groups(g, blocks, cohorts)?,
            (None, Some(g)) => Partition::new(
                g.iter().map(|grp| grp.iter().map(|&[j, k]| SourceId::new(j, k)).collect()).collect(),
                blocks,
                cohorts,
            )?,
            (None, None) => Partition::homogeneous(blocks, cohorts),
            (Some(_), Some(_)) => {
                return Err(QifError::Config("give either block_groups or source_groups, not both".into()))
            }
        };
        match &self.labels {
            Some(l) => partition.with_labels(l.clone()),
            None => Ok(partition),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub mode: Mode,
    /// Cohort handled by this process in worker mode.
    #[serde(default)]
    pub cohort: Option<u32>,
    #[serde(rename = "source")]
    pub sources: Vec<SourceSpec>,
    #[serde(default = "default_partition")]
    pub partition: PartitionSpec,
    /// Further partitions ranked against `partition` by BIC.
    #[serde(default, rename = "candidate")]
    pub candidates: Vec<PartitionSpec>,
    #[serde(default)]
    pub solver: SolverControl,
    #[serde(default)]
    pub integrate: IntegrateOptions,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub second_round: bool,
    /// Also write coefficient and QQ CSVs next to the report.
    #[serde(default)]
    pub plot_data: bool,
}

fn default_version() -> u32 {
    JOB_FORMAT_VERSION
}
fn default_partition() -> PartitionSpec {
    PartitionSpec { name: None, block_groups: None, source_groups: None, labels: None }
}
fn default_output() -> PathBuf {
    PathBuf::from("qifmeta-out")
}

impl JobConfig {
    /// Parses and validates a job file. Relative data paths are resolved
    /// against the directory holding the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| QifError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            for s in &mut cfg.sources {
                if s.path.is_relative() {
                    s.path = dir.join(&s.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: JobConfig = toml::from_str(text).map_err(|e| QifError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("job config serializes")
    }

    pub fn blocks(&self) -> u32 {
        self.sources.iter().map(|s| s.block).max().unwrap_or(0)
    }

    pub fn cohorts(&self) -> u32 {
        self.sources.iter().map(|s| s.cohort).max().unwrap_or(0)
    }

    pub fn cohort_ids(&self) -> Vec<u32> {
        self.sources.iter().map(|s| s.cohort).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sources of one cohort in block order.
    pub fn cohort_sources(&self, cohort: u32) -> Vec<&SourceSpec> {
        let mut v: Vec<_> = self.sources.iter().filter(|s| s.cohort == cohort).collect();
        v.sort_by_key(|s| s.block);
        v
    }

    pub fn partition(&self) -> Result<Partition> {
        self.partition.build(self.blocks(), self.cohorts())
    }

    pub fn candidate_partitions(&self) -> Result<Vec<(String, Partition)>> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let name = c.name.clone().unwrap_or_else(|| format!("candidate{}", i + 1));
                Ok((name, c.build(self.blocks(), self.cohorts())?))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != JOB_FORMAT_VERSION {
            return Err(QifError::Config(format!("unsupported job format_version {}", self.format_version)));
        }
        if self.sources.is_empty() {
            return Err(QifError::Config("no [[source]] entries".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sources {
            if s.block == 0 || s.cohort == 0 {
                return Err(QifError::Config("block and cohort indices are 1-based".into()));
            }
            if !seen.insert((s.block, s.cohort)) {
                return Err(QifError::Config(format!("source ({},{}) declared twice", s.block, s.cohort)));
            }
        }
        // the partition must reference only declared sources and cover all of them
        self.partition()?;
        self.candidate_partitions()?;
        if self.mode == Mode::Worker {
            match self.cohort {
                Some(k) if self.cohort_ids().contains(&k) => {}
                Some(k) => return Err(QifError::Config(format!("worker cohort {k} has no declared sources"))),
                None => return Err(QifError::Config("worker mode needs `cohort`".into())),
            }
        }
        Ok(())
    }
}
