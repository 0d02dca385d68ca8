use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Correlation, SimDesign, SourceParams};
use crate::error::{QifError, Result};
use crate::model::{BasisSet, CohortData, LinkFunction, Participant, SourceData};

/// Random stream of replication `rep`. Stream 0 belongs to the design itself.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

/// Gaussian outcomes with block-wise AR(1) or exchangeable covariance
/// `σ²_jk R(ρ_jk)`; blocks of one participant are independent.
pub fn gen_gaussian(design: &SimDesign, rep: usize) -> Result<Vec<CohortData>> {
    if design.link != LinkFunction::Identity {
        return Err(QifError::Config("gen_gaussian needs the identity link".into()));
    }
    generate_with(design, rep, |eta, z, _| eta + z)
}

/// Correlated binary outcomes by thresholding a latent Gaussian vector:
/// `Y_r = 1` iff `Z_r ≤ Φ⁻¹(μ_r)`, so every margin is exactly logistic.
pub fn gen_binary(design: &SimDesign, rep: usize) -> Result<Vec<CohortData>> {
    if design.link != LinkFunction::Logit {
        return Err(QifError::Config("gen_binary needs the logit link".into()));
    }
    let normal = Normal::standard();
    generate_with(design, rep, |eta, z, _| {
        let mu = LinkFunction::Logit.forward(eta);
        if z <= normal.inverse_cdf(mu) {
            1.0
        } else {
            0.0
        }
    })
}

/// Dispatches on the design's link.
pub fn generate(design: &SimDesign, rep: usize) -> Result<Vec<CohortData>> {
    match design.link {
        LinkFunction::Identity => gen_gaussian(design, rep),
        LinkFunction::Logit => gen_binary(design, rep),
    }
}

/// Writes a unit-variance correlated vector into `z` in O(m).
pub fn latent_vector<R: rand::Rng>(rng: &mut R, family: Correlation, rho: f64, z: &mut [f64]) {
    match family {
        Correlation::Ar1 => {
            let innov = (1.0 - rho * rho).sqrt();
            let mut prev = 0.0;
            for (t, zt) in z.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                prev = if t == 0 { e } else { rho * prev + innov * e };
                *zt = prev;
            }
        }
        Correlation::Exchangeable => {
            let u: f64 = StandardNormal.sample(rng);
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            for zt in z.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *zt = a * u + b * e;
            }
        }
    }
}

fn generate_with(
    design: &SimDesign,
    rep: usize,
    outcome: impl Fn(f64, f64, &SourceParams) -> f64,
) -> Result<Vec<CohortData>> {
    design.validate()?;
    let params = design.source_params();
    let mut rng = replication_rng(design.seed, rep);
    let p = design.p();
    let total_m: usize = design.block_sizes.iter().sum();
    let block_theta: Vec<DVector<f64>> =
        (1..=design.blocks()).map(|j| design.group_theta(design.group_of_block(j))).collect();
    let shared = design.covariate_correlation.sqrt();
    let own = (1.0 - design.covariate_correlation).sqrt();
    let basis = BasisSet::new(design.working);

    let mut cohorts = Vec::with_capacity(design.cohort_sizes.len());
    let mut z = vec![0.0; design.block_sizes.iter().copied().max().unwrap_or(0)];
    for (k, &n_k) in design.cohort_sizes.iter().enumerate() {
        let mut blocks: Vec<Vec<Participant>> = design.block_sizes.iter().map(|_| Vec::with_capacity(n_k)).collect();
        for _ in 0..n_k {
            // covariates over all outcomes of the participant, column by column
            let mut x = DMatrix::from_element(total_m, p, 1.0);
            for c in 1..p {
                let f: f64 = StandardNormal.sample(&mut rng);
                for r in 0..total_m {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x[(r, c)] = shared * f + own * e;
                }
            }
            let mut start = 0;
            for (j, &m) in design.block_sizes.iter().enumerate() {
                let sp = &params[j][k];
                let xj = x.rows(start, m).into_owned();
                start += m;
                latent_vector(&mut rng, design.correlation, sp.rho, &mut z[..m]);
                let eta = &xj * &block_theta[j];
                let sd = sp.sigma2.sqrt();
                let y = DVector::from_fn(m, |r, _| {
                    let latent = if design.link == LinkFunction::Identity { sd * z[r] } else { z[r] };
                    outcome(eta[r], latent, sp)
                });
                blocks[j].push(Participant::new(y, xj));
            }
        }
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(j, parts)| Ok((j as u32 + 1, SourceData::new(parts, design.link, basis)?)))
            .collect::<Result<Vec<_>>>()?;
        cohorts.push(CohortData::new(k as u32 + 1, blocks)?);
    }
    Ok(cohorts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BasisFamily;

    fn design(link: LinkFunction) -> SimDesign {
        SimDesign::from_toml(&format!(
            r#"
            cohort_sizes = [300, 200]
            block_sizes = [6, 4]
            link = "{}"
            theta = [[-0.5, 1.0, -0.7]]
            null_covariate = true
            seed = 99
            "#,
            if link == LinkFunction::Logit { "logit" } else { "identity" }
        ))
        .unwrap()
    }

    fn lag_correlation(series: &[Vec<f64>], h: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for s in series {
            for t in 0..s.len() {
                den += s[t] * s[t];
                if t + h < s.len() {
                    num += s[t] * s[t + h];
                }
            }
        }
        let m = series[0].len() as f64;
        num / (m - h as f64) / (den / m)
    }

    #[test]
    fn ar1_latent_has_geometric_autocorrelation() {
        let mut rng = replication_rng(5, 0);
        let mut series = Vec::new();
        for _ in 0..10000 {
            let mut z = vec![0.0; 400];
            latent_vector(&mut rng, Correlation::Ar1, 0.5, &mut z);
            series.push(z);
        }
        for h in 1..=3 {
            let r = lag_correlation(&series, h);
            assert!((r - 0.5f64.powi(h as i32)).abs() < 0.01, "lag {h}: {r}");
        }
        let mut indep = Vec::new();
        for _ in 0..2000 {
            let mut z = vec![0.0; 20];
            latent_vector(&mut rng, Correlation::Ar1, 0.0, &mut z);
            indep.push(z);
        }
        assert!(lag_correlation(&indep, 1).abs() < 3.0 / (2000.0f64 * 20.0).sqrt());
    }

    #[test]
    fn generation_is_deterministic() {
        let d = design(LinkFunction::Logit);
        let a = generate(&d, 3).unwrap();
        let b = generate(&d, 3).unwrap();
        let c = generate(&d, 4).unwrap();
        assert_eq!(a[0].blocks[0].1.participants(), b[0].blocks[0].1.participants());
        assert_ne!(a[0].blocks[0].1.participants(), c[0].blocks[0].1.participants());
        assert_eq!(d.source_params(), d.source_params());
    }

    #[test]
    fn shapes_follow_design() {
        let d = design(LinkFunction::Identity);
        let cohorts = generate(&d, 0).unwrap();
        assert_eq!(cohorts.len(), 2);
        assert_eq!(cohorts[1].n(), 200);
        let block2 = cohorts[0].block(2).unwrap();
        assert_eq!(block2.participants()[0].y.len(), 4);
        assert_eq!(block2.p(), 4);
        assert_eq!(block2.basis.family, BasisFamily::Ar1);
        assert!(gen_binary(&d, 0).is_err());
    }

    #[test]
    fn binary_margins_are_logistic() {
        // fixed covariate rows so every coordinate has one known mean
        let mut d = design(LinkFunction::Logit);
        d.cohort_sizes = vec![20000];
        d.block_sizes = vec![5];
        d.theta = vec![vec![-1.2]];
        d.null_covariate = false;
        let cohorts = gen_binary(&d, 1).unwrap();
        let data = cohorts[0].block(1).unwrap();
        let mu = LinkFunction::Logit.forward(-1.2);
        let n = data.n() as f64;
        for r in 0..5 {
            let mean = data.participants().iter().map(|p| p.y[r]).sum::<f64>() / n;
            assert!((mean - mu).abs() < 4.0 * (mu * (1.0 - mu) / n).sqrt(), "coordinate {r}: {mean} vs {mu}");
        }
    }

    #[test]
    fn gaussian_margins_match_model() {
        let mut d = design(LinkFunction::Identity);
        d.cohort_sizes = vec![20000];
        d.block_sizes = vec![4];
        d.theta = vec![vec![2.0]];
        d.null_covariate = false;
        d.sigma2 = 2.5;
        let cohorts = gen_gaussian(&d, 2).unwrap();
        let data = cohorts[0].block(1).unwrap();
        let n = data.n() as f64;
        for r in 0..4 {
            let ys: Vec<f64> = data.participants().iter().map(|p| p.y[r]).collect();
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((mean - 2.0).abs() < 4.0 * (2.5 / n).sqrt());
            // sd of a sample variance is about σ²√(2/n)
            assert!((var - 2.5).abs() < 4.0 * 2.5 * (2.0 / n).sqrt());
        }
    }
}
