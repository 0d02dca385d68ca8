use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::combine::{Partition, SourceId};
use crate::error::{QifError, Result};
use crate::model::{BasisFamily, LinkFunction};

pub const DESIGN_FORMAT_VERSION: u32 = 1;

/// Latent within-block correlation used by the generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    Ar1,
    Exchangeable,
}

/// Declarative simulation design, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    #[serde(default = "default_version")]
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    /// `n_k`, one entry per cohort.
    pub cohort_sizes: Vec<usize>,
    /// `m_j`, one entry per block.
    pub block_sizes: Vec<usize>,
    pub link: LinkFunction,
    #[serde(default = "default_correlation")]
    pub correlation: Correlation,
    /// Working basis used when fitting.
    #[serde(default = "default_working")]
    pub working: BasisFamily,
    /// Per-source ρ is drawn uniformly from this range unless `rho` is given.
    #[serde(default = "default_rho_range")]
    pub rho_range: [f64; 2],
    /// Explicit ρ indexed `[block][cohort]`.
    #[serde(default)]
    pub rho: Option<Vec<Vec<f64>>>,
    /// Gaussian outcome variance, shared by all sources unless `sigma2_range` is given.
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default)]
    pub sigma2_range: Option<[f64; 2]>,
    /// True coefficients per group, intercept first.
    pub theta: Vec<Vec<f64>>,
    /// Groups of blocks sharing a coefficient vector across all cohorts.
    /// Absent means one group.
    #[serde(default)]
    pub groups: Option<Vec<Vec<u32>>>,
    /// Appends a covariate whose true coefficient is zero.
    #[serde(default)]
    pub null_covariate: bool,
    /// Equicorrelation of each covariate across a participant's outcomes.
    #[serde(default = "default_covariate_correlation")]
    pub covariate_correlation: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

fn default_version() -> u32 {
    DESIGN_FORMAT_VERSION
}
fn default_correlation() -> Correlation {
    Correlation::Ar1
}
fn default_working() -> BasisFamily {
    BasisFamily::Ar1
}
fn default_rho_range() -> [f64; 2] {
    [0.3, 0.7]
}
fn default_sigma2() -> f64 {
    1.0
}
fn default_covariate_correlation() -> f64 {
    0.3
}
fn default_replications() -> usize {
    200
}

/// Per-source generator parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    pub rho: f64,
    pub sigma2: f64,
}

impl SimDesign {
    pub fn from_toml(text: &str) -> Result<Self> {
        let design: SimDesign = toml::from_str(text).map_err(|e| QifError::Config(e.to_string()))?;
        design.validate()?;
        Ok(design)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| QifError::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("design serializes")
    }

    pub fn cohorts(&self) -> u32 {
        self.cohort_sizes.len() as u32
    }

    pub fn blocks(&self) -> u32 {
        self.block_sizes.len() as u32
    }

    /// Coefficients per source, including the null covariate.
    pub fn p(&self) -> usize {
        self.theta[0].len() + usize::from(self.null_covariate)
    }

    pub fn n_total(&self) -> usize {
        self.cohort_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QifError::Config(m));
        if self.format_version != DESIGN_FORMAT_VERSION {
            return bad(format!("unsupported design format_version {}", self.format_version));
        }
        if self.cohort_sizes.is_empty() || self.block_sizes.is_empty() {
            return bad("design needs at least one cohort and one block".into());
        }
        if self.cohort_sizes.contains(&0) || self.block_sizes.contains(&0) {
            return bad("cohort and block sizes must be positive".into());
        }
        if self.theta.is_empty() || self.theta.iter().any(|t| t.len() != self.theta[0].len() || t.is_empty()) {
            return bad("theta must list one equally sized, non-empty vector per group".into());
        }
        let groups = self.block_groups();
        if groups.len() != self.theta.len() {
            return bad(format!("{} groups but {} theta vectors", groups.len(), self.theta.len()));
        }
        let [lo, hi] = self.rho_range;
        if !(lo <= hi && lo > -1.0 && hi < 1.0) {
            return bad(format!("rho_range [{lo}, {hi}] must satisfy -1 < lo <= hi < 1"));
        }
        if let Some(rho) = &self.rho {
            if rho.len() != self.block_sizes.len() || rho.iter().any(|r| r.len() != self.cohort_sizes.len()) {
                return bad("rho must be a blocks × cohorts table".into());
            }
            if rho.iter().flatten().any(|r| r.abs() >= 1.0) {
                return bad("every |rho| must be below 1".into());
            }
        }
        if self.correlation == Correlation::Exchangeable {
            let negative = match &self.rho {
                Some(rho) => rho.iter().flatten().any(|&r| r < 0.0),
                None => lo < 0.0,
            };
            if negative {
                return bad("exchangeable latent correlation needs rho >= 0".into());
            }
        }
        if self.sigma2 <= 0.0 || self.sigma2_range.is_some_and(|[a, b]| !(a > 0.0 && a <= b)) {
            return bad("outcome variances must be positive".into());
        }
        if !(0.0..1.0).contains(&self.covariate_correlation) {
            return bad("covariate_correlation must lie in [0, 1)".into());
        }
        self.partition().map(|_| ())
    }

    fn block_groups(&self) -> Vec<Vec<u32>> {
        self.groups.clone().unwrap_or_else(|| vec![(1..=self.blocks()).collect()])
    }

    /// Partition of the J×K grid implied by the block groups.
    pub fn partition(&self) -> Result<Partition> {
        Partition::from_block_groups(&self.block_groups(), self.blocks(), self.cohorts())
    }

    /// Group index of every block.
    pub fn group_of_block(&self, block: u32) -> usize {
        self.block_groups().iter().position(|g| g.contains(&block)).expect("validated partition")
    }

    /// True coefficients of group `g`, with the null covariate appended.
    pub fn group_theta(&self, g: usize) -> DVector<f64> {
        let mut t = self.theta[g].clone();
        if self.null_covariate {
            t.push(0.0);
        }
        DVector::from_vec(t)
    }

    /// True value of the stacked integrated parameter under `partition`.
    pub fn truth_for(&self, partition: &Partition) -> DVector<f64> {
        let p = self.p();
        let mut out = DVector::zeros(partition.group_count() * p);
        for (g, group) in partition.groups().iter().enumerate() {
            let t = self.group_theta(self.group_of_block(group[0].block));
            out.rows_mut(g * p, p).copy_from(&t);
        }
        out
    }

    /// ρ and σ² of every source. Drawn ranges come from a stream reserved
    /// for the design, so they do not change between replications.
    pub fn source_params(&self) -> Vec<Vec<SourceParams>> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let mut out = Vec::with_capacity(self.block_sizes.len());
        for j in 0..self.block_sizes.len() {
            let mut row = Vec::with_capacity(self.cohort_sizes.len());
            for k in 0..self.cohort_sizes.len() {
                let [lo, hi] = self.rho_range;
                let drawn_rho = lo + (hi - lo) * rng.random::<f64>();
                let drawn_sigma = self.sigma2_range.map(|[a, b]| a + (b - a) * rng.random::<f64>());
                let rho = self.rho.as_ref().map_or(drawn_rho, |r| r[j][k]);
                row.push(SourceParams { rho, sigma2: drawn_sigma.unwrap_or(self.sigma2) });
            }
            out.push(row);
        }
        out
    }

    pub fn source_ids(&self) -> Vec<SourceId> {
        (1..=self.cohorts()).flat_map(|k| (1..=self.blocks()).map(move |j| SourceId::new(j, k))).collect()
    }
}
