//! Synthetic panels with known parameters and a Monte Carlo harness.
//!
//! The main generator follows the structural model behind the control
//! function estimator:
//!
//! ```text
//! M_it = Pi * z_it + gamma' x_it + delta_t + c_i2 + u_it          (reduced form)
//! N_it ~ Poisson(c_i * exp(beta1 * M_it + beta2' x_it + zeta_t + kappa_it))
//! (kappa_it, u_it) jointly Gaussian with correlation `endogeneity_corr`
//! ```
//!
//! The instrument `z_it` is normalised recalls: each entity carries a roster of
//! products with random exits and entries, recall counts are Poisson with a
//! mean proportional to the roster size, and `z = recalls / products * 100`.
//! Heterogeneity (`log c_i`, `c_i2`) can be correlated with the entity mean of
//! the instrument, so a random-effects estimator would be inconsistent.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cfiv::run_cf_iv;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_indexed, rng_for, streams, Execution};
use crate::inference::{normal_quantile, wald_test};
use crate::linfe::{cluster_robust_cov, fit_within_ols, instrument_f_stat};
use crate::panel::{normalize_recalls, FeatureSpec, Panel};

/// Parameters of the control-function data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpParams {
    pub n_entities: usize,
    pub n_periods: usize,
    pub first_year: i64,
    /// Elasticity of the outcome with respect to market size.
    pub beta_size: f64,
    /// First-stage loading of normalised recalls on market size.
    pub instrument_loading: f64,
    /// Correlation between the outcome shock and the market-size shock.
    pub endogeneity_corr: f64,
    pub kappa_sd: f64,
    pub u_sd: f64,
    /// Mean outcome count at average market size.
    pub outcome_scale: f64,
    /// Standard deviation of `log c_i`.
    pub heterogeneity_sd: f64,
    /// Standard deviation of `c_i2`.
    pub size_heterogeneity_sd: f64,
    /// Correlation of both heterogeneity terms with the entity-mean instrument.
    pub heterogeneity_instrument_corr: f64,
    /// Expected recalls per hundred products and year.
    pub recall_intensity: f64,
    pub products_mean: f64,
    pub product_exit_rate: f64,
    pub n_controls: usize,
    /// Effect of each control on the outcome.
    pub control_effect: f64,
    /// Effect of each control on market size.
    pub control_on_size: f64,
    pub year_effect_sd: f64,
    pub seed: u64,
}

impl Default for DgpParams {
    fn default() -> Self {
        DgpParams {
            n_entities: 200,
            n_periods: 8,
            first_year: 2006,
            beta_size: 0.6,
            instrument_loading: -0.03,
            endogeneity_corr: 0.0,
            kappa_sd: 0.3,
            u_sd: 0.3,
            outcome_scale: 3.0,
            heterogeneity_sd: 0.5,
            size_heterogeneity_sd: 1.0,
            heterogeneity_instrument_corr: 0.3,
            recall_intensity: 10.0,
            products_mean: 40.0,
            product_exit_rate: 0.08,
            n_controls: 1,
            control_effect: 0.2,
            control_on_size: 0.5,
            year_effect_sd: 0.1,
            seed: 1,
        }
    }
}

impl DgpParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_entities < 2 {
            return bad("at least two entities are required");
        }
        if self.n_periods < 3 {
            return bad("at least three periods are required");
        }
        if !(-1.0..=1.0).contains(&self.endogeneity_corr) {
            return bad("endogeneity correlation must lie in [-1, 1]");
        }
        if !(-1.0..=1.0).contains(&self.heterogeneity_instrument_corr) {
            return bad("heterogeneity correlation must lie in [-1, 1]");
        }
        if self.recall_intensity < 0.0 {
            return bad("recall intensity must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.product_exit_rate) {
            return bad("product exit rate must lie in [0, 1)");
        }
        if self.products_mean < 1.0 || self.outcome_scale <= 0.0 {
            return bad("product mean must be at least 1 and outcome scale positive");
        }
        if [
            self.kappa_sd,
            self.u_sd,
            self.heterogeneity_sd,
            self.size_heterogeneity_sd,
            self.year_effect_sd,
        ]
        .iter()
        .any(|s| *s < 0.0)
        {
            return bad("standard deviations must be nonnegative");
        }
        Ok(())
    }

    /// Column roles matching [`simulate_panel`] output.
    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            outcome: "trials".into(),
            endogenous: "market_size".into(),
            instruments: vec!["recalls_norm".into()],
            controls: (1..=self.n_controls).map(|k| format!("x{k}")).collect(),
            year_dummies: true,
        }
    }

    /// Instrument loading that makes the population first-stage F (the
    /// noncentrality `n Pi^2 Var(z~) / sigma_u^2` of a single instrument)
    /// equal `target`, with the signs of the current loading. `Var(z~)` is
    /// measured on a large pilot panel drawn from these parameters.
    pub fn loading_for_population_f(&self, target: f64) -> Result<f64> {
        let pilot = DgpParams {
            n_entities: 4000,
            seed: derive_seed(self.seed, 0x7069_6c6f, 0),
            ..self.clone()
        };
        let sim = simulate_panel(&pilot)?;
        let z = sim.panel.values("recalls_norm")?;
        let var = within_variance(&z, self.n_periods);
        if var <= 0.0 {
            return Err(Error::InvalidSpec("instrument has no within variation".into()));
        }
        let n = (self.n_entities * self.n_periods) as f64;
        let sign = if self.instrument_loading < 0.0 { -1.0 } else { 1.0 };
        Ok(sign * (target * self.u_sd.powi(2) / (n * var)).sqrt())
    }
}

fn within_variance(values: &[f64], t: usize) -> f64 {
    let n = values.len();
    let mut ss = 0.0;
    for chunk in values.chunks(t) {
        let m = chunk.iter().sum::<f64>() / t as f64;
        ss += chunk.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    ss / n as f64
}

/// Simulated panel plus the latent draws behind it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: Panel,
    /// Product ids present per entity and year.
    pub rosters: Vec<Vec<BTreeSet<u32>>>,
    pub kappa: Vec<f64>,
    pub u: Vec<f64>,
    pub log_c: Vec<f64>,
}

fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive Poisson mean").sample(rng) as u64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw a panel from the control-function DGP.
///
/// Columns: `trials`, `market_size`, `recalls`, `recalls_norm`,
/// `recalls_norm_lag` (absent in the first year), `products`, `exits`
/// (products present now and gone next year; absent in the last year) and
/// controls `x1..xk`.
pub fn simulate_panel(params: &DgpParams) -> Result<SimulatedPanel> {
    params.validate()?;
    let n = params.n_entities;
    let t = params.n_periods;
    let cells = n * t;
    let mut rng = rng_for(params.seed, streams::SIMULATE, 0);

    // product rosters
    let mut rosters = Vec::with_capacity(n);
    for _ in 0..n {
        let mut next_id: u32 = 0;
        let mut current = BTreeSet::new();
        let initial = poisson_draw(&mut rng, params.products_mean).max(1);
        for _ in 0..initial {
            current.insert(next_id);
            next_id += 1;
        }
        let mut years = Vec::with_capacity(t);
        years.push(current.clone());
        for _ in 1..t {
            let mut survivors: BTreeSet<u32> = current
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= params.product_exit_rate)
                .collect();
            let entrants = poisson_draw(&mut rng, params.products_mean * params.product_exit_rate);
            for _ in 0..entrants {
                survivors.insert(next_id);
                next_id += 1;
            }
            if survivors.is_empty() {
                survivors.insert(next_id);
                next_id += 1;
            }
            years.push(survivors.clone());
            current = survivors;
        }
        rosters.push(years);
    }
    let products: Vec<f64> = rosters
        .iter()
        .flat_map(|ys| ys.iter().map(|r| r.len() as f64))
        .collect();
    let exits: Vec<Option<f64>> = rosters
        .iter()
        .flat_map(|ys| (0..t).map(move |k| (k + 1 < t).then(|| ys[k].difference(&ys[k + 1]).count() as f64)))
        .collect();

    let recalls: Vec<f64> = products
        .iter()
        .map(|p| poisson_draw(&mut rng, params.recall_intensity * p / 100.0) as f64)
        .collect();
    let z = normalize_recalls(&recalls, &products)?;

    let controls: Vec<Vec<f64>> = (0..params.n_controls)
        .map(|_| {
            let mut col = Vec::with_capacity(cells);
            for _ in 0..n {
                let a = normal(&mut rng);
                for _ in 0..t {
                    col.push(a + normal(&mut rng));
                }
            }
            col
        })
        .collect();

    let size_year: Vec<f64> = (0..t).map(|_| params.year_effect_sd * normal(&mut rng)).collect();
    let outcome_year: Vec<f64> = (0..t).map(|_| params.year_effect_sd * normal(&mut rng)).collect();

    // heterogeneity correlated with the entity-mean instrument
    let zbar: Vec<f64> = z.chunks(t).map(|c| c.iter().sum::<f64>() / t as f64).collect();
    let zm = zbar.iter().sum::<f64>() / n as f64;
    let zsd = (zbar.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n as f64).sqrt();
    let h = params.heterogeneity_instrument_corr;
    let std_z: Vec<f64> = zbar
        .iter()
        .map(|v| if zsd > 0.0 { (v - zm) / zsd } else { 0.0 })
        .collect();
    let mix = |rng: &mut ChaCha8Rng, s: f64| h * s + (1.0 - h * h).sqrt() * normal(rng);
    let log_c: Vec<f64> = std_z
        .iter()
        .map(|s| params.heterogeneity_sd * mix(&mut rng, *s))
        .collect();
    let c2: Vec<f64> = std_z
        .iter()
        .map(|s| 5.0 + params.size_heterogeneity_sd * mix(&mut rng, *s))
        .collect();

    let rho = params.endogeneity_corr;
    let mut u = Vec::with_capacity(cells);
    let mut kappa = Vec::with_capacity(cells);
    for _ in 0..cells {
        let e1 = normal(&mut rng);
        let e2 = normal(&mut rng);
        u.push(params.u_sd * e1);
        kappa.push(params.kappa_sd * (rho * e1 + (1.0 - rho * rho).sqrt() * e2));
    }

    let market_size: Vec<f64> = (0..cells)
        .map(|i| {
            let (e, k) = (i / t, i % t);
            let xs: f64 = controls.iter().map(|c| c[i]).sum();
            params.instrument_loading * z[i] + params.control_on_size * xs + size_year[k] + c2[e] + u[i]
        })
        .collect();
    let m_mean = market_size.iter().sum::<f64>() / cells as f64;

    let mut trials = Vec::with_capacity(cells);
    for i in 0..cells {
        let (e, k) = (i / t, i % t);
        let xs: f64 = controls.iter().map(|c| c[i]).sum();
        let index =
            params.beta_size * (market_size[i] - m_mean) + params.control_effect * xs + outcome_year[k] + kappa[i]
                - 0.5 * params.kappa_sd.powi(2);
        let mean = params.outcome_scale * log_c[e].exp() * index.exp();
        if !(mean <= 1e9) {
            return Err(Error::Explosive(mean));
        }
        trials.push(poisson_draw(&mut rng, mean) as f64);
    }

    let entities = (0..n).map(|e| format!("m{e:04}")).collect();
    let times = (0..t as i64).map(|k| params.first_year + k).collect();
    let mut panel = Panel::new(entities, times)?;
    panel.add_column("trials", trials)?;
    panel.add_column("market_size", market_size)?;
    panel.add_column("recalls", recalls)?;
    panel.add_column("recalls_norm", z)?;
    let lag = panel.lagged("recalls_norm")?;
    panel.add_partial_column("recalls_norm_lag", lag)?;
    panel.add_column("products", products)?;
    panel.add_partial_column("exits", exits)?;
    for (k, col) in controls.into_iter().enumerate() {
        panel.add_column(&format!("x{}", k + 1), col)?;
    }
    Ok(SimulatedPanel {
        panel,
        rosters,
        kappa,
        u,
        log_c,
    })
}

/// Parameters of the abnormal-value event-study generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventDgpParams {
    pub n_entities: usize,
    pub n_treated: usize,
    pub n_periods: usize,
    pub first_year: i64,
    pub n_sectors: usize,
    /// Growth shock in the event year.
    pub shock: f64,
    /// Reverse the shock in the following year (level recovers).
    pub rebound: bool,
    pub aggregate_loading: f64,
    pub control_effect: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for EventDgpParams {
    fn default() -> Self {
        EventDgpParams {
            n_entities: 200,
            n_treated: 50,
            n_periods: 12,
            first_year: 2004,
            n_sectors: 6,
            shock: -0.20,
            rebound: true,
            aggregate_loading: 0.8,
            control_effect: 0.3,
            noise_sd: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EventPanel {
    pub panel: Panel,
    /// Event year of each treated entity.
    pub events: BTreeMap<String, i64>,
}

/// Sales growth panel with a planted shock in the event year of treated units.
///
/// Columns: `growth`, `sector_growth` (the aggregate regressor), `x1`,
/// `recall` (1 in the event year), and level series `sales` and
/// `sector_sales` whose log differences reproduce the growth columns.
pub fn simulate_event_panel(params: &EventDgpParams) -> Result<EventPanel> {
    let n = params.n_entities;
    let t = params.n_periods;
    if n < 2 || t < 4 || params.n_treated > n || params.n_sectors < 2 {
        return Err(Error::InvalidSpec(
            "event generator needs n >= 2, T >= 4, at least two sectors and n_treated <= n".into(),
        ));
    }
    let mut rng = rng_for(params.seed, streams::SIMULATE, 1);
    let sector_growth: Vec<Vec<f64>> = (0..params.n_sectors)
        .map(|_| (0..t).map(|_| 0.02 + 0.05 * normal(&mut rng)).collect())
        .collect();
    let year: Vec<f64> = (0..t).map(|_| 0.02 * normal(&mut rng)).collect();
    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;

    let mut growth = Vec::with_capacity(n * t);
    let mut agg = Vec::with_capacity(n * t);
    let mut x1 = Vec::with_capacity(n * t);
    let mut recall = vec![0.0; n * t];
    let mut events = BTreeMap::new();
    let names: Vec<String> = (0..n).map(|e| format!("u{e:04}")).collect();
    for e in 0..n {
        let sector = e % params.n_sectors;
        let alpha = 0.03 * normal(&mut rng);
        let event = if e < params.n_treated {
            // leave room for the rebound year
            let k = rng.random_range(1..t - 1);
            events.insert(names[e].clone(), params.first_year + k as i64);
            recall[e * t + k] = 1.0;
            Some(k)
        } else {
            None
        };
        for k in 0..t {
            let x = normal(&mut rng);
            let mut g = alpha
                + params.aggregate_loading * sector_growth[sector][k]
                + year[k]
                + params.control_effect * x
                + noise.sample(&mut rng);
            if let Some(ev) = event {
                if k == ev {
                    g += params.shock;
                } else if params.rebound && k == ev + 1 {
                    g -= params.shock;
                }
            }
            growth.push(g);
            agg.push(sector_growth[sector][k]);
            x1.push(x);
        }
    }
    let levels = |g: &[f64]| -> Vec<f64> {
        g.chunks(t)
            .flat_map(|c| {
                let mut level = 100.0f64;
                c.iter()
                    .enumerate()
                    .map(move |(k, v)| {
                        if k > 0 {
                            level *= v.exp();
                        }
                        level
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let mut panel = Panel::new(names, (0..t as i64).map(|k| params.first_year + k).collect())?;
    panel.add_column("sales", levels(&growth))?;
    panel.add_column("sector_sales", levels(&agg))?;
    panel.add_column("growth", growth)?;
    panel.add_column("sector_growth", agg)?;
    panel.add_column("x1", x1)?;
    panel.add_column("recall", recall)?;
    Ok(EventPanel { panel, events })
}

/// Parameters of the dynamic linear panel generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArDgpParams {
    pub n_entities: usize,
    pub n_periods: usize,
    pub first_year: i64,
    pub autoregression: f64,
    /// MA(1) coefficient of the level errors.
    pub ma_coef: f64,
    pub effect_sd: f64,
    pub noise_sd: f64,
    /// Coefficient on the exogenous regressor `x`.
    pub exog_coef: f64,
    /// Loading of the level error on `x`; nonzero makes `x` an invalid instrument.
    pub exog_error_loading: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for ArDgpParams {
    fn default() -> Self {
        ArDgpParams {
            n_entities: 200,
            n_periods: 6,
            first_year: 2010,
            autoregression: 0.5,
            ma_coef: 0.0,
            effect_sd: 1.0,
            noise_sd: 1.0,
            exog_coef: 0.0,
            exog_error_loading: 0.0,
            burn_in: 50,
            seed: 1,
        }
    }
}

/// `y_it = a y_i,t-1 + b x_it + c_i + e_it`, `e_it = eps_it + theta eps_i,t-1`,
/// started far enough back to be mean stationary. Columns `y` and `x`.
pub fn simulate_ar_panel(params: &ArDgpParams) -> Result<Panel> {
    let n = params.n_entities;
    let t = params.n_periods;
    if n < 2 || t < 3 {
        return Err(Error::InvalidSpec("AR generator needs n >= 2 and T >= 3".into()));
    }
    if params.autoregression.abs() >= 1.0 {
        return Err(Error::InvalidSpec("autoregression must be inside (-1, 1)".into()));
    }
    let mut rng = rng_for(params.seed, streams::SIMULATE, 2);
    let mut y = Vec::with_capacity(n * t);
    let mut x = Vec::with_capacity(n * t);
    let a = params.autoregression;
    for _ in 0..n {
        let c = params.effect_sd * normal(&mut rng);
        let mut prev = c / (1.0 - a);
        let mut prev_eps = 0.0;
        let total = params.burn_in + t;
        for k in 0..total {
            let eps = params.noise_sd * normal(&mut rng);
            let xv = normal(&mut rng) + params.exog_error_loading * eps;
            let e = eps + params.ma_coef * prev_eps;
            let v = a * prev + params.exog_coef * xv + c + e;
            if k >= params.burn_in {
                y.push(v);
                x.push(xv);
            }
            prev = v;
            prev_eps = eps;
        }
    }
    let mut panel = Panel::new(
        (0..n).map(|e| format!("g{e:04}")).collect(),
        (0..t as i64).map(|k| params.first_year + k).collect(),
    )?;
    panel.add_column("y", y)?;
    panel.add_column("x", x)?;
    Ok(panel)
}

/// Estimation pipeline run by [`monte_carlo`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Two-step control function, with the naive FE Poisson alongside.
    ControlFunction,
    /// First stage only: instrument F test.
    FirstStage,
}

/// Outcome of one replication; fields a pipeline does not produce are NaN.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub beta_cf: f64,
    pub se_cf: f64,
    pub beta_naive: f64,
    pub se_naive: f64,
    pub rho: f64,
    pub rho_p_value: f64,
    pub first_stage_f: f64,
    pub first_stage_p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub pipeline: Pipeline,
    pub reps: usize,
    pub failures: usize,
    pub master_seed: u64,
    pub alpha: f64,
    pub true_beta: f64,
    pub control_function: Option<EstimatorSummary>,
    pub naive: Option<EstimatorSummary>,
    /// Share of replications where the endogeneity Wald test rejects at `alpha`.
    pub endogeneity_rejection_rate: Option<f64>,
    /// Share where the first-stage F test rejects at `alpha`.
    pub first_stage_rejection_rate: f64,
    pub first_stage_f_above_10: f64,
    pub mean_first_stage_f: f64,
    pub replications: Vec<Replication>,
    #[serde(skip)]
    pub elapsed: Duration,
}

fn summarize(estimates: &[(f64, f64)], truth: f64, alpha: f64) -> EstimatorSummary {
    let n = estimates.len() as f64;
    let crit = normal_quantile(1.0 - alpha / 2.0);
    let mean = estimates.iter().map(|(b, _)| b).sum::<f64>() / n;
    let mse = estimates.iter().map(|(b, _)| (b - truth).powi(2)).sum::<f64>() / n;
    let covered = estimates
        .iter()
        .filter(|(b, se)| (b - truth).abs() <= crit * se)
        .count() as f64;
    EstimatorSummary {
        mean,
        bias: mean - truth,
        rmse: mse.sqrt(),
        coverage: covered / n,
    }
}

fn one_replication(params: &DgpParams, pipeline: Pipeline, alpha: f64, rep: usize, seed: u64) -> Result<Replication> {
    let p = DgpParams { seed, ..params.clone() };
    let sim = simulate_panel(&p)?;
    let spec = p.feature_spec();
    let nan = f64::NAN;
    match pipeline {
        Pipeline::ControlFunction => {
            let r = run_cf_iv(&sim.panel, &spec, alpha)?;
            let j = 0; // endogenous variable leads the second-stage regressors
            Ok(Replication {
                rep,
                seed,
                beta_cf: r.second_stage.coef[j],
                se_cf: r.second_stage_cov.variance(j).sqrt(),
                beta_naive: r.naive.coef[j],
                se_naive: r.naive_cov.variance(j).sqrt(),
                rho: r.endogeneity.estimate,
                rho_p_value: r.endogeneity.p_value,
                first_stage_f: r.first_stage_f.statistic,
                first_stage_p_value: r.first_stage_f.p_value,
            })
        }
        Pipeline::FirstStage => {
            let (sample, dummies, _) = crate::cfiv::prepare_sample(&sim.panel, &spec)?;
            let mut regs = spec.instruments.clone();
            regs.extend(spec.controls.iter().cloned());
            regs.extend(dummies);
            let fit = fit_within_ols(&sample, &spec.endogenous, &regs)?;
            let cov = cluster_robust_cov(&fit, &fit.entity_clusters)?;
            let f = instrument_f_stat(&fit, &cov, &spec.instruments)?;
            let b = wald_test(&fit, &cov, &spec.instruments[0], 0.0)?;
            Ok(Replication {
                rep,
                seed,
                beta_cf: b.estimate,
                se_cf: b.std_error,
                beta_naive: nan,
                se_naive: nan,
                rho: nan,
                rho_p_value: nan,
                first_stage_f: f.statistic,
                first_stage_p_value: f.p_value,
            })
        }
    }
}

/// Simulate and estimate `reps` times with seeds derived from `params.seed`.
///
/// For the first-stage pipeline the summary's "control function" entry refers
/// to the first instrument's loading.
pub fn monte_carlo(
    params: &DgpParams,
    pipeline: Pipeline,
    reps: usize,
    alpha: f64,
    exec: Execution,
) -> Result<McReport> {
    if reps < 50 {
        return Err(Error::InvalidSpec(format!(
            "Monte Carlo needs at least 50 replications, got {reps}"
        )));
    }
    params.validate()?;
    let start = Instant::now();
    let results = map_indexed(reps, exec, |r| {
        let seed = derive_seed(params.seed, streams::MONTE_CARLO, r as u64);
        one_replication(params, pipeline, alpha, r, seed)
    });
    let mut ok = Vec::with_capacity(reps);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                first_err.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let failures = reps - ok.len();
    if failures as f64 > 0.05 * reps as f64 {
        return Err(Error::ReplicationFailures {
            failed: failures,
            reps,
            first: first_err.unwrap_or_default(),
        });
    }
    let n = ok.len() as f64;
    let share = |f: &dyn Fn(&Replication) -> bool| ok.iter().filter(|r| f(r)).count() as f64 / n;
    let (cf, naive, endo) = match pipeline {
        Pipeline::ControlFunction => {
            let cf: Vec<(f64, f64)> = ok.iter().map(|r| (r.beta_cf, r.se_cf)).collect();
            let nv: Vec<(f64, f64)> = ok.iter().map(|r| (r.beta_naive, r.se_naive)).collect();
            (
                Some(summarize(&cf, params.beta_size, alpha)),
                Some(summarize(&nv, params.beta_size, alpha)),
                Some(share(&|r| r.rho_p_value < alpha)),
            )
        }
        Pipeline::FirstStage => {
            let est: Vec<(f64, f64)> = ok.iter().map(|r| (r.beta_cf, r.se_cf)).collect();
            (Some(summarize(&est, params.instrument_loading, alpha)), None, None)
        }
    };
    Ok(McReport {
        pipeline,
        reps,
        failures,
        master_seed: params.seed,
        alpha,
        true_beta: params.beta_size,
        control_function: cf,
        naive,
        endogeneity_rejection_rate: endo,
        first_stage_rejection_rate: share(&|r| r.first_stage_p_value < alpha),
        first_stage_f_above_10: share(&|r| r.first_stage_f > 10.0),
        mean_first_stage_f: ok.iter().map(|r| r.first_stage_f).sum::<f64>() / n,
        replications: ok,
        elapsed: start.elapsed(),
    })
}
