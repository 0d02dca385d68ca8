//! Distributional checks for Monte Carlo statistics against a χ² reference.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson correlation between sorted samples and χ²_df quantiles at the
/// plotting positions `(i − 0.5)/n`.
pub fn qq_correlation(samples: &[f64], df: usize) -> f64 {
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let qs: Vec<f64> = (0..xs.len()).map(|i| chi.inverse_cdf((i as f64 + 0.5) / n)).collect();
    pearson(&xs, &qs)
}

/// Points of a χ² QQ plot: (theoretical, empirical).
pub fn qq_points(samples: &[f64], df: usize) -> Vec<(f64, f64)> {
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().map(|(i, &x)| (chi.inverse_cdf((i as f64 + 0.5) / n), x)).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// One-sample Kolmogorov–Smirnov test against χ²_df. Returns `(D, p)`; the
/// p-value uses the asymptotic Kolmogorov distribution with Stephens'
/// small-sample adjustment.
pub fn ks_test(samples: &[f64], df: usize) -> (f64, f64) {
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = chi.cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{ChiSquared as ChiDraw, Distribution};

    #[test]
    fn kolmogorov_tail_reference_values() {
        // classical critical values: P(K > 1.358) ≈ 0.05, P(K > 1.628) ≈ 0.01
        assert!((kolmogorov_tail(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_tail(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn true_chi_square_draws_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = ChiDraw::new(7.0).unwrap();
        let xs: Vec<f64> = (0..500).map(|_| dist.sample(&mut rng)).collect();
        assert!(qq_correlation(&xs, 7) > 0.99);
        assert!(ks_test(&xs, 7).1 > 0.01);
        // wrong degrees of freedom is rejected
        assert!(ks_test(&xs, 14).1 < 1e-6);
    }
}
