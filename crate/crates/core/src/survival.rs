//! Kaplan-Meier product-limit curves and a descriptive two-group comparison.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalRow {
    pub time: f64,
    pub at_risk: usize,
    pub deaths: usize,
    pub censored: usize,
    pub survival: f64,
}

/// Step function over the distinct observed times. Censor-only times get a
/// row too, so `at_risk` chains as `n_{i+1} = n_i - d_i - c_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalCurve {
    pub group: String,
    pub n: usize,
    pub rows: Vec<SurvivalRow>,
}

impl SurvivalCurve {
    /// `S(t)`: 1 before the first row, right-continuous steps after.
    pub fn at(&self, t: f64) -> f64 {
        self.rows
            .iter()
            .take_while(|r| r.time <= t)
            .last()
            .map_or(1.0, |r| r.survival)
    }

    pub fn last_time(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.time)
    }

    pub fn first_time(&self) -> f64 {
        self.rows.first().map_or(0.0, |r| r.time)
    }
}

/// Product-limit estimate; at tied times deaths are removed before
/// censorings.
pub fn kaplan_meier(durations: &[f64], died: &[bool], group: &str) -> Result<SurvivalCurve> {
    if durations.is_empty() {
        return Err(Error::InvalidData("no durations".into()));
    }
    if durations.len() != died.len() {
        return Err(Error::InvalidData(format!(
            "{} durations but {} event flags",
            durations.len(),
            died.len()
        )));
    }
    if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::InvalidData(format!("durations must be positive, found {d}")));
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
    let mut rows = Vec::new();
    let mut at_risk = durations.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let time = durations[order[i]];
        let (mut deaths, mut censored) = (0, 0);
        while i < order.len() && durations[order[i]] == time {
            if died[order[i]] {
                deaths += 1;
            } else {
                censored += 1;
            }
            i += 1;
        }
        s *= (at_risk - deaths) as f64 / at_risk as f64;
        rows.push(SurvivalRow {
            time,
            at_risk,
            deaths,
            censored,
            survival: s,
        });
        at_risk -= deaths + censored;
    }
    Ok(SurvivalCurve {
        group: group.to_string(),
        n: durations.len(),
        rows,
    })
}

/// Smallest event time with `S(t) <= 0.5`, if the curve gets there.
pub fn median_survival(curve: &SurvivalCurve) -> Option<f64> {
    curve
        .rows
        .iter()
        .find(|r| r.deaths > 0 && r.survival <= 0.5)
        .map(|r| r.time)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupComparison {
    pub group_a: String,
    pub group_b: String,
    pub median_a: Option<f64>,
    pub median_b: Option<f64>,
    /// `median_a - median_b` when both exist.
    pub median_difference: Option<f64>,
    /// Share of grid years with `S_a < S_b`, ties counted as one half.
    pub dominance_fraction: f64,
    pub grid: Vec<f64>,
}

/// Compare two curves on the integer years both are observed over: from the
/// earliest first time to the earlier of the two last times.
pub fn compare_groups(a: &SurvivalCurve, b: &SurvivalCurve) -> Result<GroupComparison> {
    if a.rows.is_empty() || b.rows.is_empty() {
        return Err(Error::InvalidData("cannot compare an empty survival curve".into()));
    }
    let start = a.first_time().min(b.first_time()).floor().max(1.0);
    let end = a.last_time().min(b.last_time()).floor();
    let mut grid: Vec<f64> = Vec::new();
    let mut t = start;
    while t <= end {
        grid.push(t);
        t += 1.0;
    }
    if grid.is_empty() {
        grid.push(a.last_time().min(b.last_time()));
    }
    let score: f64 = grid
        .iter()
        .map(|&t| {
            let (sa, sb) = (a.at(t), b.at(t));
            if sa < sb {
                1.0
            } else if sa == sb {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    let (ma, mb) = (median_survival(a), median_survival(b));
    Ok(GroupComparison {
        group_a: a.group.clone(),
        group_b: b.group.clone(),
        median_a: ma,
        median_b: mb,
        median_difference: ma.zip(mb).map(|(x, y)| x - y),
        dominance_fraction: score / grid.len() as f64,
        grid,
    })
}

#[derive(Debug, Deserialize)]
struct DurationRecord {
    duration: f64,
    event: u8,
    group: String,
}

/// Durations grouped by label from a `duration,event,group` CSV, where
/// `event` is 1 for a death and 0 for a censoring.
pub fn load_durations<R: Read>(reader: R) -> Result<BTreeMap<String, (Vec<f64>, Vec<bool>)>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for (i, rec) in r.deserialize::<DurationRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidData(format!("row {}: {e}", i + 1)))?;
        if rec.event > 1 {
            return Err(Error::InvalidData(format!("row {}: event flag must be 0 or 1", i + 1)));
        }
        let entry = out.entry(rec.group).or_default();
        entry.0.push(rec.duration);
        entry.1.push(rec.event == 1);
    }
    if out.is_empty() {
        return Err(Error::InvalidData("no duration rows".into()));
    }
    Ok(out)
}

/// Rows of several curves as `group,time,at_risk,deaths,censored,survival`.
pub fn write_curves_csv<W: Write>(curves: &[SurvivalCurve], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "time", "at_risk", "deaths", "censored", "survival"])?;
    for c in curves {
        for r in &c.rows {
            w.write_record([
                c.group.clone(),
                r.time.to_string(),
                r.at_risk.to_string(),
                r.deaths.to_string(),
                r.censored.to_string(),
                r.survival.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        let c = kaplan_meier(&[1.0, 2.0, 3.0], &[true; 3], "g").unwrap();
        let s: Vec<f64> = c.rows.iter().map(|r| r.survival).collect();
        assert_eq!(s, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(c.at(0.5), 1.0);
    }

    #[test]
    fn all_censored_stays_at_one() {
        let c = kaplan_meier(&[1.0, 4.0, 2.0], &[false; 3], "g").unwrap();
        assert!(c.rows.iter().all(|r| r.survival == 1.0));
        assert_eq!(median_survival(&c), None);
    }

    #[test]
    fn ties_remove_deaths_first() {
        let c = kaplan_meier(&[2.0, 2.0, 2.0, 3.0], &[true, false, true, true], "g").unwrap();
        assert_eq!(c.rows[0].at_risk, 4);
        assert_eq!(c.rows[0].deaths, 2);
        assert_eq!(c.rows[0].survival, 0.5);
        assert_eq!(c.rows[1].at_risk, 1);
    }

    #[test]
    fn median_definition() {
        let c = SurvivalCurve {
            group: "g".into(),
            n: 10,
            rows: vec![
                SurvivalRow {
                    time: 2.0,
                    at_risk: 10,
                    deaths: 1,
                    censored: 0,
                    survival: 0.9,
                },
                SurvivalRow {
                    time: 5.0,
                    at_risk: 9,
                    deaths: 5,
                    censored: 0,
                    survival: 0.4,
                },
            ],
        };
        assert_eq!(median_survival(&c), Some(5.0));
    }

    #[test]
    fn identical_and_disjoint_comparisons() {
        let a = kaplan_meier(&[1.0, 2.0, 3.0, 4.0], &[true; 4], "a").unwrap();
        let same = compare_groups(&a, &a).unwrap();
        assert_eq!(same.dominance_fraction, 0.5);
        assert_eq!(same.median_difference, Some(0.0));
        let early = kaplan_meier(&[1.0, 1.0, 2.0], &[true; 3], "early").unwrap();
        let late = kaplan_meier(&[5.0, 6.0, 7.0], &[true; 3], "late").unwrap();
        assert_eq!(compare_groups(&early, &late).unwrap().dominance_fraction, 1.0);
    }

    #[test]
    fn empty_and_invalid_input() {
        assert!(kaplan_meier(&[], &[], "g").is_err());
        assert!(kaplan_meier(&[0.0], &[true], "g").is_err());
    }

    #[test]
    fn loads_grouped_csv() {
        let data = "duration,event,group\n1,1,a\n2,0,a\n3,1,b\n";
        let g = load_durations(data.as_bytes()).unwrap();
        assert_eq!(g["a"], (vec![1.0, 2.0], vec![true, false]));
        assert!(load_durations("duration,event,group\n1,2,a\n".as_bytes()).is_err());
    }

    #[test]
    fn curves_csv_has_one_row_per_step() {
        let a = kaplan_meier(&[1.0, 2.0], &[true, false], "a").unwrap();
        let mut buf = Vec::new();
        write_curves_csv(&[a], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "group,time,at_risk,deaths,censored,survival\na,1,2,1,0,0.5\na,2,1,0,1,0.5\n"
        );
    }
}
