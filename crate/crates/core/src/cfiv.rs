//! Two-step control-function estimator and its entity bootstrap.
//!
//! Step one regresses the endogenous variable on the excluded instruments,
//! the controls and year dummies by within OLS. Step two fits the conditional
//! fixed-effects Poisson model of the outcome on the endogenous variable, the
//! controls, year dummies and the step-one residuals. A robust Wald test of a
//! zero coefficient on those residuals tests idiosyncratic endogeneity.
//!
//! Second-stage standard errors are the plain cluster sandwich and ignore the
//! sampling noise of the generated residual; the bootstrap is the way to
//! account for it.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, rng_for, streams, Execution};
use crate::inference::{wald_test, Covariance, WaldResult};
use crate::linfe::{cluster_robust_cov, fit_within_ols, instrument_f_stat, FTest, FeOlsFit};
use crate::panel::{filter_nonzero_outcome, FeatureSpec, FilterReport, Panel};
use crate::poissonfe::{fit_fe_poisson, poisson_cluster_cov, FePoissonFit};

/// Name of the first-stage residual column in the second stage.
pub const RESIDUAL: &str = "cf_residual";

#[derive(Debug, Clone)]
pub struct CfIvResult {
    pub spec: FeatureSpec,
    pub alpha: f64,
    pub filter: FilterReport,
    /// Years of the estimation sample.
    pub years: (i64, i64),
    pub first_stage: FeOlsFit,
    pub first_stage_cov: Covariance,
    pub first_stage_f: FTest,
    /// Regressors: endogenous, controls, year dummies, residual.
    pub second_stage: FePoissonFit,
    pub second_stage_cov: Covariance,
    pub endogeneity: WaldResult,
    pub endogenous_detected: bool,
    /// FE Poisson without the residual on the same sample.
    pub naive: FePoissonFit,
    pub naive_cov: Covariance,
}

/// Estimation sample for `spec`: edge years with absent cells trimmed,
/// all-zero-outcome entities dropped, then year dummies appended (if the spec
/// asks for them). Returns the sample, the dummy names and the filter report.
pub fn prepare_sample(panel: &Panel, spec: &FeatureSpec) -> Result<(Panel, Vec<String>, FilterReport)> {
    spec.validate(panel)?;
    let trimmed = panel.complete_window(&spec.referenced())?;
    let (kept, report) = filter_nonzero_outcome(&trimmed, &spec.outcome)?;
    if spec.year_dummies {
        let (with, names) = kept.with_year_dummies()?;
        Ok((with, names, report))
    } else {
        Ok((kept, Vec::new(), report))
    }
}

/// Run both steps with the endogeneity verdict at level `alpha`.
pub fn run_cf_iv(panel: &Panel, spec: &FeatureSpec, alpha: f64) -> Result<CfIvResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidSpec(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (sample, dummies, filter) = prepare_sample(panel, spec)?;
    run_on_sample(sample, spec, &dummies, alpha, filter)
}

fn run_on_sample(
    mut sample: Panel,
    spec: &FeatureSpec,
    dummies: &[String],
    alpha: f64,
    filter: FilterReport,
) -> Result<CfIvResult> {
    let mut stage1 = spec.instruments.clone();
    stage1.extend(spec.controls.iter().cloned());
    stage1.extend(dummies.iter().cloned());
    let first_stage = fit_within_ols(&sample, &spec.endogenous, &stage1)?;
    let first_stage_cov = cluster_robust_cov(&first_stage, &first_stage.entity_clusters)?;
    let first_stage_f = instrument_f_stat(&first_stage, &first_stage_cov, &spec.instruments)?;

    if first_stage.n_obs != sample.n_cells() || first_stage.entities != sample.entities() {
        return Err(Error::InvalidData("first- and second-stage samples differ".into()));
    }
    sample.add_column(RESIDUAL, first_stage.resid.to_vec())?;

    let mut stage2 = vec![spec.endogenous.clone()];
    stage2.extend(spec.controls.iter().cloned());
    stage2.extend(dummies.iter().cloned());
    let naive = fit_fe_poisson(&sample, &spec.outcome, &stage2)?;
    let naive_cov = poisson_cluster_cov(&naive, &naive.entity_clusters)?;
    stage2.push(RESIDUAL.to_string());
    let second_stage = fit_fe_poisson(&sample, &spec.outcome, &stage2)?;
    let second_stage_cov = poisson_cluster_cov(&second_stage, &second_stage.entity_clusters)?;
    let endogeneity = wald_test(&second_stage, &second_stage_cov, RESIDUAL, 0.0)?;
    let times = sample.times();
    Ok(CfIvResult {
        spec: spec.clone(),
        alpha,
        filter,
        years: (times[0], times[times.len() - 1]),
        endogenous_detected: endogeneity.rejects(alpha),
        first_stage,
        first_stage_cov,
        first_stage_f,
        second_stage,
        second_stage_cov,
        endogeneity,
        naive,
        naive_cov,
    })
}

/// One bootstrap draw: the residual coefficient and its robust t statistic
/// under each single-instrument variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapDraw {
    pub rep: usize,
    pub rho_a: f64,
    pub t_a: f64,
    pub rho_b: f64,
    pub t_b: f64,
}

/// Summary of one single-instrument variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub instrument: String,
    pub rho: f64,
    /// Robust (cluster sandwich) t statistic on the original sample.
    pub robust_t: f64,
    /// Standard deviation of the bootstrap residual coefficients.
    pub bootstrap_se: f64,
    /// `rho / bootstrap_se`.
    pub bootstrap_t: f64,
    pub mean_draw_t: f64,
}

/// Instrument-swap comparison by entity bootstrap. This is an invariance
/// check between the two single-instrument variants, not a formal
/// overidentification test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub reps: usize,
    pub seed: u64,
    pub failures: usize,
    pub variant_a: VariantSummary,
    pub variant_b: VariantSummary,
    /// Mean over draws of `|t_a - t_b|`.
    pub mean_abs_t_diff: f64,
    /// Bootstrap t statistic of the first variant.
    pub summary_t: f64,
    pub draws: Vec<BootstrapDraw>,
}

impl BootstrapResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for d in &self.draws {
            w.serialize(d)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rho_and_t(sample: &Panel, spec: &FeatureSpec, dummies: &[String], instrument: &str) -> Result<(f64, f64)> {
    let single = FeatureSpec {
        instruments: vec![instrument.to_string()],
        ..spec.clone()
    };
    let filter = FilterReport {
        kept: sample.n_entities(),
        dropped: Vec::new(),
        dropped_fraction: 0.0,
    };
    let r = run_on_sample(sample.clone(), &single, dummies, 0.05, filter)?;
    let (rho, t) = (r.endogeneity.estimate, r.endogeneity.t_stat());
    if !(rho.is_finite() && t.is_finite()) {
        return Err(Error::Singular("non-finite bootstrap statistic".into()));
    }
    Ok((rho, t))
}

/// Entity bootstrap of the residual t statistic under the first two
/// instruments of `spec` used one at a time.
///
/// Both variants share the sample implied by the full spec, so a lagged
/// instrument trims the first year for both. Draw `r` uses a generator
/// derived from `(seed, r)`, which makes the result independent of
/// `exec`.
pub fn bootstrap_instrument_tstat(
    panel: &Panel,
    spec: &FeatureSpec,
    reps: usize,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapResult> {
    if spec.instruments.len() < 2 {
        return Err(Error::InvalidSpec(
            "the instrument-swap bootstrap needs two instruments".into(),
        ));
    }
    if reps < 100 {
        return Err(Error::InvalidSpec(format!(
            "bootstrap needs at least 100 replications, got {reps}"
        )));
    }
    let (sample, dummies, _) = prepare_sample(panel, spec)?;
    let (za, zb) = (&spec.instruments[0], &spec.instruments[1]);
    let (rho_a, robust_a) = rho_and_t(&sample, spec, &dummies, za)?;
    let (rho_b, robust_b) = rho_and_t(&sample, spec, &dummies, zb)?;

    let n = sample.n_entities();
    let results = map_indexed(reps, exec, |r| {
        let mut rng = rng_for(seed, streams::BOOTSTRAP, r as u64);
        let draw: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let resampled = sample.select_entities(&draw);
        let (ra, ta) = rho_and_t(&resampled, spec, &dummies, za)?;
        let (rb, tb) = rho_and_t(&resampled, spec, &dummies, zb)?;
        Ok::<_, Error>(BootstrapDraw {
            rep: r,
            rho_a: ra,
            t_a: ta,
            rho_b: rb,
            t_b: tb,
        })
    });
    let mut draws = Vec::with_capacity(reps);
    let mut first = None;
    for r in results {
        match r {
            Ok(d) => draws.push(d),
            Err(e) => {
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let failures = reps - draws.len();
    if failures as f64 > 0.05 * reps as f64 {
        return Err(Error::ReplicationFailures {
            failed: failures,
            reps,
            first: first.unwrap_or_default(),
        });
    }
    let m = draws.len() as f64;
    let sd = |f: fn(&BootstrapDraw) -> f64| {
        let mean = draws.iter().map(f).sum::<f64>() / m;
        (draws.iter().map(|d| (f(d) - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    };
    let mean = |f: fn(&BootstrapDraw) -> f64| draws.iter().map(f).sum::<f64>() / m;
    let se_a = sd(|d| d.rho_a);
    let se_b = sd(|d| d.rho_b);
    let variant_a = VariantSummary {
        instrument: za.clone(),
        rho: rho_a,
        robust_t: robust_a,
        bootstrap_se: se_a,
        bootstrap_t: rho_a / se_a,
        mean_draw_t: mean(|d| d.t_a),
    };
    let variant_b = VariantSummary {
        instrument: zb.clone(),
        rho: rho_b,
        robust_t: robust_b,
        bootstrap_se: se_b,
        bootstrap_t: rho_b / se_b,
        mean_draw_t: mean(|d| d.t_b),
    };
    Ok(BootstrapResult {
        reps,
        seed,
        failures,
        summary_t: variant_a.bootstrap_t,
        mean_abs_t_diff: mean(|d| (d.t_a - d.t_b).abs()),
        variant_a,
        variant_b,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_panel, DgpParams};

    fn small() -> (Panel, FeatureSpec) {
        let p = DgpParams {
            n_entities: 40,
            instrument_loading: -0.3,
            ..DgpParams::default()
        };
        (simulate_panel(&p).unwrap().panel, p.feature_spec())
    }

    #[test]
    fn second_stage_regressors_and_alignment() {
        let (panel, spec) = small();
        let r = run_cf_iv(&panel, &spec, 0.05).unwrap();
        assert_eq!(r.second_stage.names[0], "market_size");
        assert_eq!(r.second_stage.names.last().unwrap(), RESIDUAL);
        assert!(!r.second_stage.names.contains(&"recalls_norm".to_string()));
        assert_eq!(r.second_stage.n_obs, r.first_stage.n_obs);
        assert_eq!(r.second_stage.entities, r.first_stage.entities);
    }

    #[test]
    fn naive_fit_equals_plain_poisson() {
        let (panel, spec) = small();
        let r = run_cf_iv(&panel, &spec, 0.05).unwrap();
        let (sample, dummies, _) = prepare_sample(&panel, &spec).unwrap();
        let mut regs = vec![spec.endogenous.clone()];
        regs.extend(spec.controls.clone());
        regs.extend(dummies);
        let plain = fit_fe_poisson(&sample, &spec.outcome, &regs).unwrap();
        assert!((plain.coef[0] - r.naive.coef[0]).abs() <= 1e-10);
    }

    #[test]
    fn instrument_as_control_is_rejected() {
        let (panel, mut spec) = small();
        spec.controls.push("recalls_norm".into());
        assert!(matches!(run_cf_iv(&panel, &spec, 0.05), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn bootstrap_needs_two_instruments_and_100_reps() {
        let (panel, spec) = small();
        assert!(bootstrap_instrument_tstat(&panel, &spec, 100, 1, Execution::Sequential).is_err());
        let mut two = spec.clone();
        two.instruments.push("recalls_norm_lag".into());
        assert!(bootstrap_instrument_tstat(&panel, &two, 99, 1, Execution::Sequential).is_err());
    }
}
