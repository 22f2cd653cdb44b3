//! One function per subcommand. Each writes `report.json` plus its tables and
//! figures through [`Outputs`].

use std::collections::BTreeMap;
use std::fs::File;

use panelcf::cfiv::{bootstrap_instrument_tstat, prepare_sample, run_cf_iv};
use panelcf::dgp::{monte_carlo, simulate_ar_panel, simulate_event_panel, simulate_panel};
use panelcf::dyngmm::{ar_test, fit_system_gmm, hansen_j};
use panelcf::eventstudy::{abnormal_values, aggregate_av, events_from_column, fit_potential, recenter_event_time};
use panelcf::linfe::{cluster_robust_cov, fit_within_ols, instrument_f_stat};
use panelcf::report::{band_plot_svg, coef_table, step_plot_svg, CoefRow, Conventions, Reference};
use panelcf::survival::{compare_groups, kaplan_meier, load_durations, median_survival, write_curves_csv};
use panelcf::{exec, load_panel, Panel};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, SimKind};
use crate::output::Outputs;
use crate::Failure;

fn read_panel(cfg: &RunConfig) -> Result<Panel, Failure> {
    let path = cfg.input_path()?;
    let f = File::open(path).map_err(|e| Failure::config("input_not_found", format!("{}: {e}", path.display())))?;
    let panel = load_panel(f, None)?;
    match cfg.window_bounds()? {
        Some((from, to)) => Ok(panel.window(from, to)?),
        None => Ok(panel),
    }
}

fn execution() -> panelcf::Execution {
    if exec::parallel_available() {
        panelcf::Execution::Parallel
    } else {
        panelcf::Execution::Sequential
    }
}

fn report(subcommand: &str, body: Value) -> Value {
    let mut v = json!({
        "subcommand": subcommand,
        "conventions": Conventions::default(),
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut v, body) {
        m.extend(extra);
    }
    v
}

pub fn first_stage(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let panel = read_panel(cfg)?;
    let spec = cfg.feature_spec()?;
    let (sample, dummies, filter) = prepare_sample(&panel, spec)?;
    let mut regs = spec.instruments.clone();
    regs.extend(spec.controls.iter().cloned());
    regs.extend(dummies);
    let fit = fit_within_ols(&sample, &spec.endogenous, &regs)?;
    let cov = cluster_robust_cov(&fit, &fit.entity_clusters)?;
    let f = instrument_f_stat(&fit, &cov, &spec.instruments)?;
    let table = table_of(
        &fit.names,
        &fit.coef,
        &cov,
        Reference::StudentT((fit.n_clusters - 1) as f64),
    );
    out.csv_rows("first_stage_coefficients.csv", &table)?;
    out.json(
        "report.json",
        &report(
            "first-stage",
            json!({
                "spec": spec,
                "years": [sample.times()[0], sample.times()[sample.n_times() - 1]],
                "filter": filter,
                "n_obs": fit.n_obs,
                "n_entities": fit.n_entities,
                "n_clusters": fit.n_clusters,
                "coefficients": table,
                "f_test": f,
                "strong_instruments": f.statistic > 10.0,
            }),
        ),
    )
}

fn table_of(names: &[String], coef: &ndarray::Array1<f64>, cov: &panelcf::Covariance, r: Reference) -> Vec<CoefRow> {
    coef_table(names, &coef.to_vec(), cov, r)
}

pub fn cf_poisson(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let panel = read_panel(cfg)?;
    let spec = cfg.feature_spec()?;
    let r = run_cf_iv(&panel, spec, cfg.alpha)?;
    let g1 = (r.first_stage.n_clusters - 1) as f64;
    let first = table_of(
        &r.first_stage.names,
        &r.first_stage.coef,
        &r.first_stage_cov,
        Reference::StudentT(g1),
    );
    let second = table_of(
        &r.second_stage.names,
        &r.second_stage.coef,
        &r.second_stage_cov,
        Reference::Normal,
    );
    let naive = table_of(&r.naive.names, &r.naive.coef, &r.naive_cov, Reference::Normal);
    out.csv_rows("first_stage_coefficients.csv", &first)?;
    out.csv_rows("second_stage_coefficients.csv", &second)?;
    out.csv_rows("naive_coefficients.csv", &naive)?;

    let bootstrap = match cfg.reps {
        Some(reps) => {
            let b = bootstrap_instrument_tstat(&panel, spec, reps, cfg.seed, execution())?;
            out.csv_with("bootstrap_draws.csv", |w| b.write_csv(w))?;
            json!({
                "reps": b.reps,
                "seed": b.seed,
                "failures": b.failures,
                "variant_a": b.variant_a,
                "variant_b": b.variant_b,
                "mean_abs_t_difference": b.mean_abs_t_diff,
                "summary_t": b.summary_t,
            })
        }
        None => Value::Null,
    };
    out.json(
        "report.json",
        &report(
            "cf-poisson",
            json!({
                "spec": spec,
                "alpha": cfg.alpha,
                "years": [r.years.0, r.years.1],
                "filter": r.filter,
                "n_obs": r.second_stage.n_obs,
                "n_entities": r.second_stage.entities.len(),
                "beta": second[0],
                "first_stage": { "coefficients": first, "f_test": r.first_stage_f },
                "second_stage": { "coefficients": second, "loglik": r.second_stage.loglik, "iterations": r.second_stage.iterations },
                "naive": { "coefficients": naive, "loglik": r.naive.loglik },
                "endogeneity": r.endogeneity,
                "endogenous_detected": r.endogenous_detected,
                "bootstrap": bootstrap,
            }),
        ),
    )
}

pub fn event_study(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let panel = read_panel(cfg)?;
    let ev = &cfg.event;
    let fit = fit_potential(
        &panel,
        &ev.outcome,
        &ev.aggregate,
        &ev.controls,
        ev.year_dummies,
        ev.forecast_variance,
    )?;
    let av = abnormal_values(&fit);
    let events = events_from_column(&panel, &ev.event_column)?;
    let sample = recenter_event_time(&av, &events)?;
    let curve = aggregate_av(&sample)?;
    out.csv_rows("abnormal_values.csv", &sample.rows)?;
    out.csv_with("event_curve.csv", |w| curve.write_csv(w))?;
    let pts: Vec<(f64, f64, f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.tau as f64, p.mean, p.lo, p.hi))
        .collect();
    out.text(
        "event_study.svg",
        &band_plot_svg(
            "Mean abnormal value by event time",
            "years since event",
            "abnormal value",
            &pts,
        ),
    )?;
    let omitted: Vec<Value> = fit
        .fit
        .omitted
        .iter()
        .map(|(n, why)| json!({"name": n, "reason": why}))
        .collect();
    out.json(
        "report.json",
        &report(
            "event-study",
            json!({
                "config": ev,
                "potential_model": {
                    "regressors": fit.fit.names,
                    "coefficients": fit.fit.coef.to_vec(),
                    "omitted": omitted,
                    "sigma2": fit.fit.sigma2,
                    "n_obs": fit.fit.n_obs,
                },
                "n_units": curve.n_units,
                "ignored_events": curve.ignored_events,
                "curve": curve.points,
            }),
        ),
    )
}

pub fn survival(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let path = cfg.input_path()?;
    let f = File::open(path).map_err(|e| Failure::config("input_not_found", format!("{}: {e}", path.display())))?;
    let groups = load_durations(f)?;
    let curves = groups
        .iter()
        .map(|(g, (d, e))| kaplan_meier(d, e, g))
        .collect::<panelcf::Result<Vec<_>>>()?;
    let mut comparisons = Vec::new();
    for (i, a) in curves.iter().enumerate() {
        for b in &curves[i + 1..] {
            comparisons.push(compare_groups(a, b)?);
        }
    }
    out.csv_with("survival_curves.csv", |w| write_curves_csv(&curves, w))?;
    let plot: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|c| (c.group.clone(), c.rows.iter().map(|r| (r.time, r.survival)).collect()))
        .collect();
    out.text(
        "survival.svg",
        &step_plot_svg("Kaplan-Meier survival", "time", "S(t)", &plot),
    )?;
    let summary: Vec<Value> = curves
        .iter()
        .map(|c| {
            json!({
                "group": c.group,
                "n": c.n,
                "deaths": c.rows.iter().map(|r| r.deaths).sum::<usize>(),
                "median": median_survival(c),
            })
        })
        .collect();
    out.json(
        "report.json",
        &report("survival", json!({ "groups": summary, "comparisons": comparisons })),
    )
}

#[derive(Serialize)]
struct ResidualRow<'a> {
    entity: &'a str,
    year: i64,
    level: f64,
    difference: Option<f64>,
}

pub fn gmm(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let panel = read_panel(cfg)?;
    let fit = fit_system_gmm(&panel, &cfg.gmm, cfg.gmm_step)?;
    let table = table_of(&fit.names, &fit.coef, &fit.cov, Reference::Normal);
    out.csv_rows("gmm_coefficients.csv", &table)?;
    let mut rows = Vec::new();
    for (i, entity) in panel.entities().iter().enumerate() {
        for k in 0..fit.level_resid.ncols() {
            rows.push(ResidualRow {
                entity,
                year: panel.times()[k + 1],
                level: fit.level_resid[[i, k]],
                difference: (k > 0).then(|| fit.diff_resid[[i, k - 1]]),
            });
        }
    }
    out.csv_rows("gmm_residuals.csv", &rows)?;
    let hansen = match hansen_j(&fit) {
        Ok(j) => json!(j),
        Err(panelcf::Error::ExactlyIdentified) => json!({ "undefined": "exactly identified" }),
        Err(e) => return Err(e.into()),
    };
    let ar: BTreeMap<String, Value> = (1..=2)
        .map(|m| {
            let v = match ar_test(&fit, m) {
                Ok(t) => json!(t),
                Err(e) => json!({ "undefined": e.to_string() }),
            };
            (format!("ar{m}"), v)
        })
        .collect();
    out.json(
        "report.json",
        &report(
            "gmm",
            json!({
                "spec": cfg.gmm,
                "step": fit.step,
                "collapsed": fit.collapsed,
                "n_entities": fit.n_entities,
                "n_years": fit.n_years,
                "n_instruments": fit.n_instruments(),
                "instruments": fit.instrument_labels,
                "coefficients": table,
                "hansen_j": hansen,
                "arellano_bond": ar,
                "warnings": fit.warnings,
            }),
        ),
    )
}

pub fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let body = match cfg.simulate {
        SimKind::Cf => {
            let sim = simulate_panel(&cfg.dgp)?;
            out.csv_with("panel.csv", |w| sim.panel.write_csv(w))?;
            json!({
                "kind": cfg.simulate,
                "params": cfg.dgp,
                "n_entities": sim.panel.n_entities(),
                "n_years": sim.panel.n_times(),
                "feature_spec": cfg.dgp.feature_spec(),
            })
        }
        SimKind::Event => {
            let sim = simulate_event_panel(&cfg.event_dgp)?;
            out.csv_with("panel.csv", |w| sim.panel.write_csv(w))?;
            json!({
                "kind": cfg.simulate,
                "params": cfg.event_dgp,
                "n_entities": sim.panel.n_entities(),
                "n_years": sim.panel.n_times(),
                "events": sim.events,
            })
        }
        SimKind::Ar => {
            let panel = simulate_ar_panel(&cfg.ar_dgp)?;
            out.csv_with("panel.csv", |w| panel.write_csv(w))?;
            json!({
                "kind": cfg.simulate,
                "params": cfg.ar_dgp,
                "n_entities": panel.n_entities(),
                "n_years": panel.n_times(),
            })
        }
    };
    out.json("report.json", &report("simulate", body))
}

pub fn monte_carlo_run(cfg: &RunConfig, out: &mut Outputs) -> Result<(), Failure> {
    let reps = cfg.reps.unwrap_or(500);
    let r = monte_carlo(&cfg.dgp, cfg.pipeline, reps, cfg.alpha, execution())?;
    out.csv_rows("replications.csv", &r.replications)?;
    let mut v = serde_json::to_value(&r).map_err(|e| Failure::data("serialize", e.to_string()))?;
    if let Value::Object(m) = &mut v {
        m.remove("replications");
        m.insert("params".into(), json!(cfg.dgp));
    }
    out.json("report.json", &report("monte-carlo", v))
}
