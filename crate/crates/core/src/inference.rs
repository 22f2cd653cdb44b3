//! Covariance containers, Wald tests and reference distributions shared by
//! the linear and Poisson estimators.

use ndarray::{Array1, Array2};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};

/// Anything that carries named coefficient estimates.
pub trait Coefficients {
    fn names(&self) -> &[String];
    fn coefficients(&self) -> &Array1<f64>;

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    fn coefficient(&self, name: &str) -> Result<f64> {
        Ok(self.coefficients()[self.index_of(name)?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Classical,
    ClusterRobust,
}

/// Estimated covariance of a coefficient vector.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: Array2<f64>,
    pub kind: CovarianceKind,
    /// Number of clusters (or observations for classical covariances).
    pub n_clusters: usize,
    /// Multiplier already applied to the sandwich.
    pub small_sample_factor: f64,
}

impl Covariance {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.matrix.diag().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn variance(&self, index: usize) -> f64 {
        self.matrix[[index, index]]
    }

    pub fn matrix_rows(&self) -> Vec<Vec<f64>> {
        self.matrix.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Single-coefficient Wald test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldResult {
    pub coefficient: String,
    pub estimate: f64,
    pub h0: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
}

impl WaldResult {
    /// Signed t (z) statistic `(estimate - h0) / se`.
    pub fn t_stat(&self) -> f64 {
        (self.estimate - self.h0) / self.std_error
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `W = (b_j - h0)^2 / Var(b_j)` against a chi-square with one degree of freedom.
pub fn wald_test<C: Coefficients + ?Sized>(
    fit: &C,
    cov: &Covariance,
    coefficient: &str,
    h0: f64,
) -> Result<WaldResult> {
    let j = fit.index_of(coefficient)?;
    let var = cov.variance(j);
    if !(var > 0.0) {
        return Err(Error::Singular(format!(
            "variance of `{coefficient}` is {var}; Wald statistic undefined"
        )));
    }
    let estimate = fit.coefficients()[j];
    let statistic = (estimate - h0).powi(2) / var;
    Ok(WaldResult {
        coefficient: coefficient.to_string(),
        estimate,
        h0,
        std_error: var.sqrt(),
        statistic,
        p_value: chi2_sf(statistic, 1.0),
    })
}

/// Upper tail of a chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let d = ChiSquared::new(df).expect("chi-square needs positive df");
    d.sf(x)
}

/// Upper tail of an F distribution.
pub fn f_sf(x: f64, df1: f64, df2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let d = FisherSnedecor::new(df1, df2).expect("F needs positive df");
    d.sf(x)
}

/// Two-sided standard normal p-value.
pub fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * n.sf(z.abs())
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Kolmogorov-Smirnov distance between a sample and the uniform on (0, 1).
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut s: Vec<f64> = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            let hi = (i as f64 + 1.0) / n - u;
            let lo = u - i as f64 / n;
            hi.max(lo)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Fixed(Vec<String>, Array1<f64>);

    impl Coefficients for Fixed {
        fn names(&self) -> &[String] {
            &self.0
        }
        fn coefficients(&self) -> &Array1<f64> {
            &self.1
        }
    }

    fn cov(v: f64) -> Covariance {
        Covariance {
            matrix: array![[v]],
            kind: CovarianceKind::ClusterRobust,
            n_clusters: 10,
            small_sample_factor: 1.0,
        }
    }

    #[test]
    fn wald_at_null_is_zero() {
        let f = Fixed(vec!["rho".into()], array![0.3]);
        let w = wald_test(&f, &cov(0.04), "rho", 0.3).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn wald_at_196_se_has_five_percent_p() {
        let se = 0.2;
        let f = Fixed(vec!["rho".into()], array![1.0 + 1.96 * se]);
        let w = wald_test(&f, &cov(se * se), "rho", 1.0).unwrap();
        assert!((w.p_value - 0.05).abs() < 1e-3);
        assert!((w.t_stat() - 1.96).abs() < 1e-12);
    }

    #[test]
    fn wald_rejects_zero_variance() {
        let f = Fixed(vec!["rho".into()], array![1.0]);
        assert!(wald_test(&f, &cov(0.0), "rho", 0.0).is_err());
        assert!(wald_test(&f, &cov(1.0), "beta", 0.0).is_err());
    }

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&s) - 0.005).abs() < 1e-12);
    }
}
