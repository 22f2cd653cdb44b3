//! Within (entity-demeaned) least squares, cluster-robust covariance and the
//! excluded-instrument F test.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{f_sf, Coefficients, Covariance, CovarianceKind};
use crate::linalg::{crossprod, grouped_outer, sandwich, PivotedCholesky, RANK_TOL};
use crate::panel::{group_demean, Panel};

/// What to do when the demeaned regressors are linearly dependent.
///
/// Columns that are constant within every entity are always dropped (the
/// within transformation wipes them out); this only governs dependence among
/// the remaining columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collinearity {
    #[default]
    Error,
    /// Drop later columns of a dependent set, in regressor order.
    Drop,
}

#[derive(Debug, Clone)]
pub struct FeOlsFit {
    pub dependent: String,
    pub names: Vec<String>,
    /// Requested regressors that were dropped, with the reason.
    pub omitted: Vec<(String, String)>,
    pub coef: Array1<f64>,
    /// Within residuals, entity-major over the sample cells.
    pub resid: Array1<f64>,
    /// Observed minus residual, i.e. fitted values including the entity mean.
    pub fitted: Array1<f64>,
    pub demeaned_x: Array2<f64>,
    pub xtx_inv: Array2<f64>,
    /// Entity means of the dependent variable and of each retained regressor.
    pub entity_means_y: Array1<f64>,
    pub entity_means_x: Array2<f64>,
    pub sigma2: f64,
    pub n_obs: usize,
    pub n_entities: usize,
    pub df_resid: usize,
    pub entities: Vec<String>,
    pub times: Vec<i64>,
    /// Cluster index of each entity and the cluster count, taken from the panel.
    pub entity_clusters: Vec<usize>,
    pub n_clusters: usize,
}

impl Coefficients for FeOlsFit {
    fn names(&self) -> &[String] {
        &self.names
    }
    fn coefficients(&self) -> &Array1<f64> {
        &self.coef
    }
}

impl FeOlsFit {
    /// Entity position of each sample row.
    pub fn entity_of_row(&self) -> Vec<usize> {
        let t = self.times.len();
        (0..self.n_obs).map(|r| r / t).collect()
    }

    /// `(entity, year)` label of each sample row.
    pub fn row_label(&self, row: usize) -> (&str, i64) {
        let t = self.times.len();
        (&self.entities[row / t], self.times[row % t])
    }

    /// `sigma^2 (X'X)^{-1}` on the demeaned regressors.
    pub fn classical_cov(&self) -> Covariance {
        Covariance {
            matrix: &self.xtx_inv * self.sigma2,
            kind: CovarianceKind::Classical,
            n_clusters: self.n_obs,
            small_sample_factor: 1.0,
        }
    }
}

/// Within estimator of `dependent` on `regressors`; dependent regressor sets
/// are an error.
pub fn fit_within_ols(panel: &Panel, dependent: &str, regressors: &[String]) -> Result<FeOlsFit> {
    fit_within_ols_with(panel, dependent, regressors, Collinearity::Error)
}

pub fn fit_within_ols_with(
    panel: &Panel,
    dependent: &str,
    regressors: &[String],
    collinearity: Collinearity,
) -> Result<FeOlsFit> {
    let n = panel.n_cells();
    let n_entities = panel.n_entities();
    let groups = panel.entity_of_cell();

    let y = Array1::from(panel.values(dependent)?);
    let mut x = Array2::<f64>::zeros((n, regressors.len()));
    for (j, name) in regressors.iter().enumerate() {
        let col = panel.values(name)?;
        x.column_mut(j).assign(&Array1::from(col));
    }
    let (xd_all, xbar_all) = group_demean(&x, &groups, n_entities);
    let y2 = y.clone().insert_axis(Axis(1));
    let (yd, ybar) = group_demean(&y2, &groups, n_entities);
    let yd = yd.column(0).to_owned();
    let ybar = ybar.column(0).to_owned();

    // drop columns the within transformation annihilates
    let mut omitted = Vec::new();
    let mut keep = Vec::new();
    for j in 0..regressors.len() {
        let raw: f64 = x.column(j).iter().map(|v| v * v).sum();
        let dm: f64 = xd_all.column(j).iter().map(|v| v * v).sum();
        if dm <= 1e-24 * raw.max(1.0) {
            omitted.push((regressors[j].clone(), "constant within entities".to_string()));
        } else {
            keep.push(j);
        }
    }

    let xtx = crossprod(&xd_all.select(Axis(1), &keep));
    let chol = PivotedCholesky::new(xtx.view(), RANK_TOL);
    if !chol.is_full_rank() {
        match collinearity {
            Collinearity::Error => {
                let columns = chol.dependent().iter().map(|&i| regressors[keep[i]].clone()).collect();
                return Err(Error::RankDeficient { columns });
            }
            Collinearity::Drop => {
                // greedy pass in regressor order so the earliest columns survive
                let mut accepted: Vec<usize> = Vec::new();
                for &j in &keep {
                    let mut trial = accepted.clone();
                    trial.push(j);
                    let m = crossprod(&xd_all.select(Axis(1), &trial));
                    if PivotedCholesky::new(m.view(), RANK_TOL).is_full_rank() {
                        accepted = trial;
                    } else {
                        omitted.push((regressors[j].clone(), "collinear".to_string()));
                    }
                }
                keep = accepted;
            }
        }
    }

    let names: Vec<String> = keep.iter().map(|&j| regressors[j].clone()).collect();
    let xd = xd_all.select(Axis(1), &keep);
    let xbar = xbar_all.select(Axis(1), &keep);
    let k = names.len();
    let (coef, xtx_inv) = if k == 0 {
        (Array1::zeros(0), Array2::zeros((0, 0)))
    } else {
        let xtx = crossprod(&xd);
        let chol = PivotedCholesky::new(xtx.view(), RANK_TOL);
        let xty = xd.t().dot(&yd);
        (chol.solve(&xty), chol.inverse())
    };

    let resid = &yd - &xd.dot(&coef);
    let fitted = &y - &resid;
    if n <= k + n_entities {
        return Err(Error::InsufficientPeriods(format!(
            "{n} observations cannot identify {k} coefficients and {n_entities} entity effects"
        )));
    }
    let df_resid = n - k - n_entities;
    let ssr: f64 = resid.iter().map(|r| r * r).sum();
    let (entity_clusters, n_clusters) = panel.cluster_index();

    Ok(FeOlsFit {
        dependent: dependent.to_string(),
        names,
        omitted,
        coef,
        resid,
        fitted,
        demeaned_x: xd,
        xtx_inv,
        entity_means_y: ybar,
        entity_means_x: xbar,
        sigma2: ssr / df_resid as f64,
        n_obs: n,
        n_entities,
        df_resid,
        entities: panel.entities().to_vec(),
        times: panel.times().to_vec(),
        entity_clusters,
        n_clusters,
    })
}

/// Cluster-robust sandwich with the `G/(G-1) (n-1)/(n-k)` small-sample factor.
///
/// `clusters[e]` is the cluster of entity `e`.
pub fn cluster_robust_cov(fit: &FeOlsFit, clusters: &[usize]) -> Result<Covariance> {
    if clusters.len() != fit.n_entities {
        return Err(Error::InvalidSpec(format!(
            "{} cluster labels for {} entities",
            clusters.len(),
            fit.n_entities
        )));
    }
    let t = fit.times.len();
    let rows: Vec<usize> = (0..fit.n_obs).map(|r| clusters[r / t]).collect();
    cluster_robust_cov_rows(fit, &rows)
}

/// Cluster-robust sandwich with an arbitrary cluster label per sample row.
pub fn cluster_robust_cov_rows(fit: &FeOlsFit, row_clusters: &[usize]) -> Result<Covariance> {
    if row_clusters.len() != fit.n_obs {
        return Err(Error::InvalidSpec(format!(
            "{} row cluster labels for {} observations",
            row_clusters.len(),
            fit.n_obs
        )));
    }
    let (row_cluster, g) = densify(row_clusters);
    if g < 2 {
        return Err(Error::InvalidData(
            "cluster-robust covariance needs at least two clusters".into(),
        ));
    }
    let n = fit.n_obs as f64;
    let k = fit.names.len() as f64;
    let mut scores = fit.demeaned_x.clone();
    for (mut row, u) in scores.axis_iter_mut(Axis(0)).zip(fit.resid.iter()) {
        row *= *u;
    }
    let meat = grouped_outer(&scores, &row_cluster, g);
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n - 1.0) / (n - k));
    let matrix = sandwich(&fit.xtx_inv, &meat) * factor;
    Ok(Covariance {
        matrix,
        kind: CovarianceKind::ClusterRobust,
        n_clusters: g,
        small_sample_factor: factor,
    })
}

pub(crate) fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let dense = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

/// Joint test that the listed coefficients are zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FTest {
    pub restrictions: Vec<String>,
    pub statistic: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

/// Wald-form F: `(Rb)' (R V R')^{-1} (Rb) / q`, referred to `F(q, G - 1)`.
pub fn instrument_f_stat(fit: &FeOlsFit, cov: &Covariance, instruments: &[String]) -> Result<FTest> {
    if instruments.is_empty() {
        return Err(Error::InvalidSpec("F test needs at least one restriction".into()));
    }
    let idx = instruments
        .iter()
        .map(|z| {
            fit.names
                .iter()
                .position(|n| n == z)
                .ok_or_else(|| Error::InvalidSpec(format!("instrument `{z}` is not among the fitted regressors")))
        })
        .collect::<Result<Vec<_>>>()?;
    let q = idx.len();
    let b = fit.coef.select(Axis(0), &idx);
    let v = cov.matrix.select(Axis(0), &idx).select(Axis(1), &idx);
    let chol = PivotedCholesky::new(v.view(), 1e-13);
    if !chol.is_full_rank() {
        return Err(Error::Singular("restricted covariance of the instruments".into()));
    }
    let statistic = b.dot(&chol.solve(&b)) / q as f64;
    let df2 = cov.n_clusters.saturating_sub(1).max(1);
    Ok(FTest {
        restrictions: instruments.to_vec(),
        statistic,
        df1: q,
        df2,
        p_value: f_sf(statistic, q as f64, df2 as f64),
    })
}
