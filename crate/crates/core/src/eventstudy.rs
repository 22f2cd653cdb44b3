//! Abnormal-value event study.
//!
//! A fixed-effects regression of the outcome on a sector aggregate, controls
//! and year dummies gives each cell a potential value. The abnormal value is
//! observed minus potential; re-centred on each unit's event year and
//! averaged over the units observed at each offset it traces the response to
//! the event, with a band from the forecast-error variances.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linfe::{fit_within_ols_with, Collinearity, FeOlsFit};
use crate::panel::Panel;

/// Forecast-error variance used for each cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastVariance {
    /// `sigma^2 + x~' V x~` with `V` the classical coefficient covariance.
    #[default]
    WithParameterUncertainty,
    /// `sigma^2` only.
    ResidualOnly,
}

#[derive(Debug, Clone)]
pub struct PotentialFit {
    pub fit: FeOlsFit,
    pub observed: Vec<f64>,
    /// In-sample fitted values including the entity-mean component.
    pub potential: Vec<f64>,
    pub forecast_variance: Vec<f64>,
    pub variance_kind: ForecastVariance,
}

/// Within regression of `y` on `aggregate`, `controls` and (optionally) year
/// dummies. Regressors collinear with earlier ones are dropped and listed in
/// `fit.omitted`; a purely sector-level aggregate with one sector is
/// collinear with the year dummies, for instance.
pub fn fit_potential(
    panel: &Panel,
    y: &str,
    aggregate: &str,
    controls: &[String],
    year_dummies: bool,
    variance_kind: ForecastVariance,
) -> Result<PotentialFit> {
    let mut regs = vec![aggregate.to_string()];
    regs.extend(controls.iter().cloned());
    let (sample, dummies) = if year_dummies {
        panel.with_year_dummies()?
    } else {
        (panel.clone(), Vec::new())
    };
    regs.extend(dummies);
    let fit = fit_within_ols_with(&sample, y, &regs, Collinearity::Drop)?;
    let observed = sample.values(y)?;
    let potential = fit.fitted.to_vec();
    let forecast_variance = (0..fit.n_obs)
        .map(|r| match variance_kind {
            ForecastVariance::ResidualOnly => fit.sigma2,
            ForecastVariance::WithParameterUncertainty => {
                let x = fit.demeaned_x.row(r);
                fit.sigma2 * (1.0 + x.dot(&fit.xtx_inv.dot(&x)))
            }
        })
        .collect();
    Ok(PotentialFit {
        fit,
        observed,
        potential,
        forecast_variance,
        variance_kind,
    })
}

/// Abnormal values on the panel grid, entity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AvPanel {
    pub entities: Vec<String>,
    pub times: Vec<i64>,
    pub values: Vec<f64>,
    pub variance: Vec<f64>,
}

/// `AV_it = y_it - E^(y_it)` for every cell.
pub fn abnormal_values(fit: &PotentialFit) -> AvPanel {
    AvPanel {
        entities: fit.fit.entities.clone(),
        times: fit.fit.times.clone(),
        values: fit.observed.iter().zip(&fit.potential).map(|(o, p)| o - p).collect(),
        variance: fit.forecast_variance.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRow {
    pub entity: String,
    pub year: i64,
    pub tau: i64,
    pub av: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSample {
    pub rows: Vec<EventRow>,
    pub n_units: usize,
    /// Events after each unit's first one; ignored for centring.
    pub ignored_events: usize,
}

/// Event years per entity from the years where `column` is positive.
pub fn events_from_column(panel: &Panel, column: &str) -> Result<BTreeMap<String, Vec<i64>>> {
    let v = panel.values(column)?;
    let t = panel.n_times();
    let mut out = BTreeMap::new();
    for (e, name) in panel.entities().iter().enumerate() {
        let years: Vec<i64> = (0..t)
            .filter(|&k| v[e * t + k] > 0.0)
            .map(|k| panel.times()[k])
            .collect();
        if !years.is_empty() {
            out.insert(name.clone(), years);
        }
    }
    Ok(out)
}

/// Keep the entities with an event and index their rows by
/// `tau = year - first event year`.
pub fn recenter_event_time(av: &AvPanel, events: &BTreeMap<String, Vec<i64>>) -> Result<EventSample> {
    let t = av.times.len();
    let (lo, hi) = (av.times[0], av.times[t - 1]);
    let position: BTreeMap<&str, usize> = av.entities.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
    let mut outside = Vec::new();
    let mut rows = Vec::new();
    let mut n_units = 0;
    let mut ignored = 0;
    for (entity, years) in events {
        let Some(first) = years.iter().min().copied() else {
            continue;
        };
        let Some(&e) = position.get(entity.as_str()) else {
            return Err(Error::InvalidData(format!(
                "event entity `{entity}` is not in the panel"
            )));
        };
        if first < lo || first > hi {
            outside.push((entity.clone(), first));
            continue;
        }
        n_units += 1;
        ignored += years.len() - 1;
        for k in 0..t {
            rows.push(EventRow {
                entity: entity.clone(),
                year: av.times[k],
                tau: av.times[k] - first,
                av: av.values[e * t + k],
                variance: av.variance[e * t + k],
            });
        }
    }
    if !outside.is_empty() {
        return Err(Error::EventOutsideWindow(outside));
    }
    if n_units == 0 {
        return Err(Error::EmptyEventSample);
    }
    Ok(EventSample {
        rows,
        n_units,
        ignored_events: ignored,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventPoint {
    pub tau: i64,
    pub mean: f64,
    pub variance: f64,
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventCurve {
    pub points: Vec<EventPoint>,
    pub n_units: usize,
    pub ignored_events: usize,
}

impl EventCurve {
    pub fn point(&self, tau: i64) -> Option<&EventPoint> {
        self.points.iter().find(|p| p.tau == tau)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean abnormal value per offset, `sum AV / N_tau`, with
/// `Var = sum Var(AV) / N_tau^2` and a 95% band `mean +- 1.96 sqrt(Var)`.
pub fn aggregate_av(ev: &EventSample) -> Result<EventCurve> {
    if ev.rows.is_empty() {
        return Err(Error::EmptyEventSample);
    }
    let mut acc: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for r in &ev.rows {
        let a = acc.entry(r.tau).or_insert((0.0, 0.0, 0));
        a.0 += r.av;
        a.1 += r.variance;
        a.2 += 1;
    }
    let points = acc
        .into_iter()
        .map(|(tau, (s, v, n))| {
            let nf = n as f64;
            let mean = s / nf;
            let variance = v / (nf * nf);
            let half = 1.96 * variance.sqrt();
            EventPoint {
                tau,
                mean,
                variance,
                n,
                lo: mean - half,
                hi: mean + half,
            }
        })
        .collect();
    Ok(EventCurve {
        points,
        n_units: ev.n_units,
        ignored_events: ev.ignored_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(y: Vec<f64>, agg: Vec<f64>, n: usize, t: usize) -> Panel {
        let mut p = Panel::new(
            (0..n).map(|e| format!("e{e}")).collect(),
            (0..t as i64).map(|k| 2000 + k).collect(),
        )
        .unwrap();
        p.add_column("y", y).unwrap();
        p.add_column("agg", agg).unwrap();
        p
    }

    #[test]
    fn aggregate_plus_entity_effects_gives_zero_av() {
        let agg = vec![1.0, 3.0, 2.0, 5.0, 0.5, 1.5, 4.0, 2.5];
        let y: Vec<f64> = agg
            .iter()
            .enumerate()
            .map(|(i, a)| a + if i < 4 { 10.0 } else { -3.0 })
            .collect();
        let fit = fit_potential(
            &panel(y, agg, 2, 4),
            "y",
            "agg",
            &[],
            false,
            ForecastVariance::default(),
        )
        .unwrap();
        assert!((fit.fit.coef[0] - 1.0).abs() < 1e-12);
        assert!(abnormal_values(&fit).values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn event_at_first_year_gives_nonnegative_offsets() {
        let av = AvPanel {
            entities: vec!["a".into(), "b".into()],
            times: vec![2000, 2001, 2002],
            values: vec![0.0; 6],
            variance: vec![1.0; 6],
        };
        let events = BTreeMap::from([("a".to_string(), vec![2000])]);
        let ev = recenter_event_time(&av, &events).unwrap();
        let taus: Vec<i64> = ev.rows.iter().map(|r| r.tau).collect();
        assert_eq!(taus, vec![0, 1, 2]);
        assert!(matches!(
            recenter_event_time(&av, &BTreeMap::new()),
            Err(Error::EmptyEventSample)
        ));
        let late = BTreeMap::from([("a".to_string(), vec![2010]), ("b".to_string(), vec![1990])]);
        match recenter_event_time(&av, &late) {
            Err(Error::EventOutsideWindow(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn staggered_offsets_histogram() {
        let av = AvPanel {
            entities: vec!["a".into(), "b".into(), "c".into()],
            times: vec![2000, 2001, 2002, 2003],
            values: vec![0.0; 12],
            variance: vec![1.0; 12],
        };
        let events = BTreeMap::from([
            ("a".to_string(), vec![2000]),
            ("b".to_string(), vec![2001, 2003]),
            ("c".to_string(), vec![2003]),
        ]);
        let ev = recenter_event_time(&av, &events).unwrap();
        assert_eq!(ev.ignored_events, 1);
        let curve = aggregate_av(&ev).unwrap();
        let hist: Vec<(i64, usize)> = curve.points.iter().map(|p| (p.tau, p.n)).collect();
        // a: 0..3, b: -1..2, c: -3..0
        assert_eq!(hist, vec![(-3, 1), (-2, 1), (-1, 2), (0, 3), (1, 2), (2, 2), (3, 1)]);
    }

    #[test]
    fn single_unit_and_symmetric_pair() {
        let ev = EventSample {
            rows: vec![
                EventRow {
                    entity: "a".into(),
                    year: 2000,
                    tau: 0,
                    av: 0.3,
                    variance: 0.04,
                },
                EventRow {
                    entity: "b".into(),
                    year: 2001,
                    tau: 0,
                    av: -0.3,
                    variance: 0.04,
                },
            ],
            n_units: 2,
            ignored_events: 0,
        };
        let c = aggregate_av(&ev).unwrap();
        assert_eq!(c.points[0].mean, 0.0);
        assert!((c.points[0].variance - 0.02).abs() < 1e-15);
        let one = EventSample {
            rows: ev.rows[..1].to_vec(),
            n_units: 1,
            ignored_events: 0,
        };
        let c = aggregate_av(&one).unwrap();
        assert_eq!(c.points[0].mean, 0.3);
        assert_eq!(c.points[0].variance, 0.04);
        assert!((c.points[0].hi - c.points[0].mean - (c.points[0].mean - c.points[0].lo)).abs() < 1e-15);
    }
}
