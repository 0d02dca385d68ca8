use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{QifError, Result};

/// A data source: block `j` of cohort `k`, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceId {
    pub block: u32,
    pub cohort: u32,
}

impl SourceId {
    pub fn new(block: u32, cohort: u32) -> Self {
        SourceId { block, cohort }
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.block, self.cohort)
    }
}

/// Disjoint grouping of the J×K sources into groups that share one
/// coefficient vector. Source order within a group is significant: it fixes
/// the canonical row order of every stacked matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    groups: Vec<Vec<SourceId>>,
    blocks: u32,
    cohorts: u32,
    #[serde(default)]
    labels: Vec<String>,
}

impl Partition {
    pub fn new(groups: Vec<Vec<SourceId>>, blocks: u32, cohorts: u32) -> Result<Self> {
        if blocks == 0 || cohorts == 0 {
            return Err(QifError::Partition("grid must have at least one block and one cohort".into()));
        }
        let mut seen = BTreeSet::new();
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(QifError::Partition(format!("group {} is empty", g + 1)));
            }
            for src in group {
                if src.block == 0 || src.block > blocks || src.cohort == 0 || src.cohort > cohorts {
                    return Err(QifError::Partition(format!("source {src} lies outside the {blocks}×{cohorts} grid")));
                }
                if !seen.insert(*src) {
                    return Err(QifError::Partition(format!("source {src} appears more than once")));
                }
            }
        }
        let expected = blocks as usize * cohorts as usize;
        if seen.len() != expected {
            let missing: Vec<String> = (1..=blocks)
                .flat_map(|j| (1..=cohorts).map(move |k| SourceId::new(j, k)))
                .filter(|s| !seen.contains(s))
                .map(|s| s.to_string())
                .collect();
            return Err(QifError::Partition(format!("sources not covered: {}", missing.join(", "))));
        }
        Ok(Partition { groups, blocks, cohorts, labels: Vec::new() })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.groups.len() {
            return Err(QifError::Partition(format!("{} labels for {} groups", labels.len(), self.groups.len())));
        }
        self.labels = labels;
        Ok(self)
    }

    /// One group holding every source, in entry order (cohort-major).
    pub fn homogeneous(blocks: u32, cohorts: u32) -> Self {
        let all = (1..=cohorts).flat_map(|k| (1..=blocks).map(move |j| SourceId::new(j, k))).collect();
        Partition::new(vec![all], blocks, cohorts).expect("homogeneous partition is valid")
    }

    /// Every source on its own.
    pub fn singletons(blocks: u32, cohorts: u32) -> Self {
        let groups = (1..=cohorts).flat_map(|k| (1..=blocks).map(move |j| vec![SourceId::new(j, k)])).collect();
        Partition::new(groups, blocks, cohorts).expect("singleton partition is valid")
    }

    /// One group per block, pooling that block over cohorts.
    pub fn by_block(blocks: u32, cohorts: u32) -> Self {
        let groups = (1..=blocks).map(|j| (1..=cohorts).map(|k| SourceId::new(j, k)).collect()).collect();
        Partition::new(groups, blocks, cohorts).expect("block partition is valid")
    }

    /// Groups given as lists of block indices, each pooled over all cohorts.
    pub fn from_block_groups(block_groups: &[Vec<u32>], blocks: u32, cohorts: u32) -> Result<Self> {
        let groups = block_groups
            .iter()
            .map(|bs| (1..=cohorts).flat_map(|k| bs.iter().map(move |&j| SourceId::new(j, k))).collect())
            .collect();
        Partition::new(groups, blocks, cohorts)
    }

    pub fn groups(&self) -> &[Vec<SourceId>] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn blocks(&self) -> u32 {
        self.blocks
    }

    pub fn cohorts(&self) -> u32 {
        self.cohorts
    }

    /// Explicit labels, empty when defaults are used.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, g: usize) -> String {
        self.labels.get(g).cloned().unwrap_or_else(|| format!("G{}", g + 1))
    }

    pub fn group_of(&self, src: SourceId) -> Option<usize> {
        self.groups.iter().position(|grp| grp.contains(&src))
    }

    /// True when every group of `self` is a union of groups of `fine`.
    pub fn is_coarsening_of(&self, fine: &Partition) -> bool {
        if self.blocks != fine.blocks || self.cohorts != fine.cohorts {
            return false;
        }
        let coarse_of: HashMap<SourceId, usize> =
            self.groups.iter().enumerate().flat_map(|(g, grp)| grp.iter().map(move |s| (*s, g))).collect();
        fine.groups.iter().all(|grp| {
            let first = coarse_of[&grp[0]];
            grp.iter().all(|s| coarse_of[s] == first)
        })
    }
}
