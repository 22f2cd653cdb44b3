//! Fixed-effects Poisson by conditional maximum likelihood.
//!
//! Conditioning on each entity's outcome total removes the multiplicative
//! entity effect and leaves a multinomial likelihood over the entity's years:
//!
//! ```text
//! l(b) = sum_i sum_t n_it log p_it(b),   p_it(b) = exp(x_it b) / sum_s exp(x_is b)
//! ```
//!
//! The estimator is the QMLE of the exponential mean model, so the cluster
//! sandwich is the default covariance.

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{Coefficients, Covariance, CovarianceKind};
use crate::linalg::{crossprod, inv_spd, sandwich, solve_spd, PivotedCholesky, RANK_TOL};
use crate::linfe::densify;
use crate::panel::{group_demean, Panel};

/// Newton settings.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Bound on the scaled gradient, see [`FePoissonFit::scaled_grad_norm`].
    pub grad_tol: f64,
    /// Bound on `max |step| / max(1, max |b|)`.
    pub step_tol: f64,
    /// Coefficients beyond this magnitude signal an unbounded direction.
    pub divergence_bound: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 100,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            divergence_bound: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NewtonStep {
    pub iteration: usize,
    pub loglik: f64,
    pub grad_norm: f64,
    pub step_halvings: usize,
}

#[derive(Debug, Clone)]
pub struct FePoissonFit {
    pub outcome: String,
    pub names: Vec<String>,
    pub coef: Array1<f64>,
    pub loglik: f64,
    /// Outcome total per entity.
    pub entity_totals: Array1<f64>,
    /// Fitted within-entity shares, entity-major.
    pub shares: Array1<f64>,
    pub score: Array1<f64>,
    pub hessian: Array2<f64>,
    /// Score contribution of every entity (rows).
    pub entity_scores: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<NewtonStep>,
    pub n_obs: usize,
    pub entities: Vec<String>,
    pub times: Vec<i64>,
    pub entity_clusters: Vec<usize>,
    pub n_clusters: usize,
}

impl Coefficients for FePoissonFit {
    fn names(&self) -> &[String] {
        &self.names
    }
    fn coefficients(&self) -> &Array1<f64> {
        &self.coef
    }
}

impl FePoissonFit {
    /// Euclidean norm of the score at the estimate.
    pub fn grad_norm(&self) -> f64 {
        self.score.dot(&self.score).sqrt()
    }

    /// Score max-norm divided by `max(1, mean entity total)`.
    pub fn scaled_grad_norm(&self) -> f64 {
        scaled(&self.score, &self.entity_totals)
    }

    /// Inverse of the observed information, the non-robust covariance.
    pub fn inverse_information(&self) -> Result<Covariance> {
        let info = -&self.hessian;
        Ok(Covariance {
            matrix: inv_spd(&info, "Poisson information matrix")?,
            kind: CovarianceKind::Classical,
            n_clusters: self.entities.len(),
            small_sample_factor: 1.0,
        })
    }

    /// Fitted conditional means `n_i p_it`.
    pub fn fitted_counts(&self) -> Array1<f64> {
        let t = self.times.len();
        Array1::from_shape_fn(self.n_obs, |r| self.entity_totals[r / t] * self.shares[r])
    }
}

fn scaled(score: &Array1<f64>, totals: &Array1<f64>) -> f64 {
    let max = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean_total = totals.mean().unwrap_or(1.0);
    max / mean_total.max(1.0)
}

struct Design {
    y: Array1<f64>,
    x: Array2<f64>,
    totals: Array1<f64>,
    t: usize,
}

impl Design {
    fn n_entities(&self) -> usize {
        self.totals.len()
    }

    /// Shares for coefficient vector `b`, with per-entity log-sum-exp.
    fn shares(&self, b: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let eta = self.x.dot(b);
        let mut p = Array1::<f64>::zeros(eta.len());
        let mut lse = Array1::<f64>::zeros(self.n_entities());
        for e in 0..self.n_entities() {
            let seg = eta.slice(ndarray::s![e * self.t..(e + 1) * self.t]);
            let m = seg.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let s: f64 = seg.iter().map(|v| (v - m).exp()).sum();
            lse[e] = m + s.ln();
            for k in 0..self.t {
                p[e * self.t + k] = (seg[k] - lse[e]).exp();
            }
        }
        (p, lse)
    }

    fn loglik(&self, b: &Array1<f64>) -> f64 {
        let eta = self.x.dot(b);
        let (_, lse) = self.shares(b);
        (0..self.y.len())
            .filter(|&r| self.y[r] > 0.0)
            .map(|r| self.y[r] * (eta[r] - lse[r / self.t]))
            .sum()
    }

    /// Log-likelihood, shares, score, Hessian and per-entity scores.
    fn evaluate(&self, b: &Array1<f64>) -> (f64, Array1<f64>, Array1<f64>, Array2<f64>, Array2<f64>) {
        let k = self.x.ncols();
        let (p, _) = self.shares(b);
        let ll = self.loglik(b);
        let mut entity_scores = Array2::<f64>::zeros((self.n_entities(), k));
        let mut hess = Array2::<f64>::zeros((k, k));
        for e in 0..self.n_entities() {
            let ne = self.totals[e];
            let rows = e * self.t..(e + 1) * self.t;
            let mut xbar = Array1::<f64>::zeros(k);
            for r in rows.clone() {
                xbar.scaled_add(p[r], &self.x.row(r));
            }
            let mut s = entity_scores.row_mut(e);
            for r in rows.clone() {
                s.scaled_add(self.y[r] - ne * p[r], &self.x.row(r));
            }
            for r in rows {
                let d = &self.x.row(r) - &xbar;
                let w = ne * p[r];
                for i in 0..k {
                    for j in 0..=i {
                        hess[[i, j]] -= w * d[i] * d[j];
                    }
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                hess[[j, i]] = hess[[i, j]];
            }
        }
        let score = entity_scores.sum_axis(Axis(0));
        (ll, p, score, hess, entity_scores)
    }
}

fn build_design(panel: &Panel, outcome: &str, regressors: &[String]) -> Result<Design> {
    let y = Array1::from(panel.values(outcome)?);
    if let Some(v) = y.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
        return Err(Error::InvalidData(format!(
            "outcome `{outcome}` must hold nonnegative integers, found {v}"
        )));
    }
    let n = panel.n_cells();
    let t = panel.n_times();
    let mut x = Array2::<f64>::zeros((n, regressors.len()));
    for (j, name) in regressors.iter().enumerate() {
        x.column_mut(j).assign(&Array1::from(panel.values(name)?));
    }
    let totals = Array1::from_shape_fn(panel.n_entities(), |e| y.slice(ndarray::s![e * t..(e + 1) * t]).sum());
    if let Some(e) = totals.iter().position(|v| *v <= 0.0) {
        return Err(Error::InvalidData(format!(
            "entity `{}` has a zero outcome total; drop uninformative entities first",
            panel.entities()[e]
        )));
    }
    Ok(Design { y, x, totals, t })
}

/// Conditional log-likelihood at `beta` (for diagnostics and invariance checks).
pub fn conditional_loglik(panel: &Panel, outcome: &str, regressors: &[String], beta: &Array1<f64>) -> Result<f64> {
    let d = build_design(panel, outcome, regressors)?;
    Ok(d.loglik(beta))
}

pub fn fit_fe_poisson(panel: &Panel, outcome: &str, regressors: &[String]) -> Result<FePoissonFit> {
    fit_fe_poisson_with(panel, outcome, regressors, NewtonOptions::default())
}

pub fn fit_fe_poisson_with(
    panel: &Panel,
    outcome: &str,
    regressors: &[String],
    opts: NewtonOptions,
) -> Result<FePoissonFit> {
    let d = build_design(panel, outcome, regressors)?;
    let k = regressors.len();

    // identification: regressors must vary within entities and be independent
    let (xd, _) = group_demean(&d.x, &panel.entity_of_cell(), panel.n_entities());
    let chol = PivotedCholesky::new(crossprod(&xd).view(), RANK_TOL);
    if !chol.is_full_rank() {
        let columns = chol.dependent().iter().map(|&i| regressors[i].clone()).collect();
        return Err(Error::RankDeficient { columns });
    }

    let mut b = Array1::<f64>::zeros(k);
    let mut trace = Vec::new();
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let (mut ll, mut p, mut score, mut hess, mut entity_scores) = d.evaluate(&b);
    let initial_info: Vec<f64> = (0..k).map(|j| -hess[[j, j]]).collect();

    while iterations < opts.max_iter {
        let grad = scaled(&score, &d.totals);
        if grad <= opts.grad_tol && last_step <= opts.step_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let info = -&hess;
        let dir = solve_spd(&info, &score, "negative Hessian")?;

        let mut step = 1.0;
        let mut halvings = 0;
        let mut candidate = &b + &dir;
        let mut cand_ll = d.loglik(&candidate);
        let slack = 1e-12 * ll.abs().max(1.0);
        while !(cand_ll >= ll - slack) && halvings < 40 {
            step *= 0.5;
            halvings += 1;
            candidate = &b + &(&dir * step);
            cand_ll = d.loglik(&candidate);
        }
        if halvings == 40 {
            converged = grad <= opts.grad_tol;
            break;
        }
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        last_step = (&dir * step).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        b = candidate;
        (ll, p, score, hess, entity_scores) = d.evaluate(&b);
        trace.push(NewtonStep {
            iteration: iterations,
            loglik: ll,
            grad_norm: score.dot(&score).sqrt(),
            step_halvings: halvings,
        });
        // still being pushed outward past the bound
        if let Some(j) = (0..k).find(|&j| b[j].abs() > opts.divergence_bound && dir[j] * b[j] > 0.0) {
            return Err(Error::Separation(regressors[j].clone()));
        }
    }
    // information collapsing along a coordinate means the likelihood keeps
    // rising towards an asymptote in that direction
    if let Some(j) = (0..k).find(|&j| -hess[[j, j]] <= 1e-12 * initial_info[j]) {
        return Err(Error::Separation(regressors[j].clone()));
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            grad_norm: score.dot(&score).sqrt(),
            trace: trace.iter().map(|s| s.grad_norm).collect(),
        });
    }

    let (entity_clusters, n_clusters) = panel.cluster_index();
    Ok(FePoissonFit {
        outcome: outcome.to_string(),
        names: regressors.to_vec(),
        coef: b,
        loglik: ll,
        entity_totals: d.totals,
        shares: p,
        score,
        hessian: hess,
        entity_scores,
        iterations,
        converged,
        trace,
        n_obs: panel.n_cells(),
        entities: panel.entities().to_vec(),
        times: panel.times().to_vec(),
        entity_clusters,
        n_clusters,
    })
}

/// Cluster sandwich `G/(G-1) A^{-1} B A^{-1}`, `A = -H`, `B = sum_g s_g s_g'`
/// over cluster-summed scores. `clusters[e]` is the cluster of entity `e`.
pub fn poisson_cluster_cov(fit: &FePoissonFit, clusters: &[usize]) -> Result<Covariance> {
    if !fit.converged {
        return Err(Error::InvalidSpec("covariance requested for an unconverged fit".into()));
    }
    if clusters.len() != fit.entities.len() {
        return Err(Error::InvalidSpec(format!(
            "{} cluster labels for {} entities",
            clusters.len(),
            fit.entities.len()
        )));
    }
    let (dense, g) = densify(clusters);
    if g < 2 {
        return Err(Error::InvalidData(
            "cluster-robust covariance needs at least two clusters".into(),
        ));
    }
    let a_inv = inv_spd(&(-&fit.hessian), "negative Hessian")?;
    let k = fit.coef.len();
    let mut sums = Array2::<f64>::zeros((g, k));
    for (e, s) in fit.entity_scores.axis_iter(Axis(0)).enumerate() {
        let mut row = sums.row_mut(dense[e]);
        row += &s;
    }
    let meat = crossprod(&sums);
    let factor = g as f64 / (g as f64 - 1.0);
    Ok(Covariance {
        matrix: sandwich(&a_inv, &meat) * factor,
        kind: CovarianceKind::ClusterRobust,
        n_clusters: g,
        small_sample_factor: factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(y: Vec<f64>, x: Vec<f64>, n_ent: usize, n_t: usize) -> Panel {
        let mut p = Panel::new((0..n_ent).map(|e| format!("e{e}")).collect(), (0..n_t as i64).collect()).unwrap();
        p.add_column("y", y).unwrap();
        p.add_column("x", x).unwrap();
        p
    }

    #[test]
    fn entity_constant_regressor_is_unidentified() {
        let p = toy(
            vec![1.0, 2.0, 3.0, 0.0, 1.0, 4.0],
            vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0],
            2,
            3,
        );
        assert!(matches!(
            fit_fe_poisson(&p, "y", &["x".into()]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn shares_sum_to_one_and_score_vanishes() {
        let p = toy(
            vec![1.0, 3.0, 2.0, 0.0, 2.0, 5.0, 4.0, 1.0, 1.0],
            vec![0.1, 0.7, 0.3, -0.4, 0.2, 0.9, 0.5, -0.2, 0.0],
            3,
            3,
        );
        let fit = fit_fe_poisson(&p, "y", &["x".into()]).unwrap();
        for e in 0..3 {
            let s: f64 = fit.shares.slice(ndarray::s![e * 3..e * 3 + 3]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(fit.grad_norm() < 1e-8);
        assert!(fit.hessian[[0, 0]] < 0.0);
        let cov = poisson_cluster_cov(&fit, &fit.entity_clusters).unwrap();
        assert!(cov.matrix[[0, 0]] > 0.0);
    }

    #[test]
    fn monotone_counts_signal_separation() {
        // counts only in the year with the largest regressor in every entity
        let p = toy(
            vec![0.0, 0.0, 3.0, 0.0, 0.0, 2.0],
            vec![0.0, 1.0, 2.0, 0.5, 1.0, 3.0],
            2,
            3,
        );
        match fit_fe_poisson(&p, "y", &["x".into()]) {
            Err(Error::Separation(c)) => assert_eq!(c, "x"),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn zero_total_entity_is_rejected() {
        let p = toy(
            vec![0.0, 0.0, 0.0, 1.0, 2.0, 0.0],
            vec![0.1, 0.2, 0.3, 0.1, 0.5, 0.2],
            2,
            3,
        );
        assert!(matches!(
            fit_fe_poisson(&p, "y", &["x".into()]),
            Err(Error::InvalidData(_))
        ));
    }
}
