//! Balanced entity-by-year panels, CSV ingestion and derived market features.
//!
//! Cells are stored entity-major: the cell for entity `e` and the `t`-th year
//! sits at `e * T + t`. Every column covers every cell. Derived columns that
//! need leads or lags mark the unavailable edge cells as absent (`None`);
//! estimators only accept fully present columns, see [`Panel::complete_window`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    entities: Vec<String>,
    clusters: Vec<String>,
    times: Vec<i64>,
    columns: Vec<(String, Vec<Option<f64>>)>,
}

impl Panel {
    /// Empty panel over `entities x times`; clusters default to the entities.
    pub fn new(entities: Vec<String>, times: Vec<i64>) -> Result<Self> {
        if entities.is_empty() || times.is_empty() {
            return Err(Error::InvalidData(
                "panel needs at least one entity and one year".into(),
            ));
        }
        let mut seen = HashSet::new();
        for e in &entities {
            if !seen.insert(e.as_str()) {
                return Err(Error::InvalidData(format!("entity `{e}` listed twice")));
            }
        }
        if times.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::InvalidData(
                "years must be strictly increasing in steps of one".into(),
            ));
        }
        Ok(Panel {
            clusters: entities.clone(),
            entities,
            times,
            columns: Vec::new(),
        })
    }

    /// Replace the per-entity cluster labels.
    pub fn with_clusters(mut self, clusters: Vec<String>) -> Result<Self> {
        if clusters.len() != self.entities.len() {
            return Err(Error::InvalidData(format!(
                "{} cluster labels for {} entities",
                clusters.len(),
                self.entities.len()
            )));
        }
        self.clusters = clusters;
        Ok(self)
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn clusters(&self) -> &[String] {
        &self.clusters
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_cells(&self) -> usize {
        self.entities.len() * self.times.len()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|(n, _)| n == name)
    }

    pub fn cell_index(&self, entity: usize, time: usize) -> usize {
        entity * self.times.len() + time
    }

    /// Add a fully observed column.
    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "column `{name}` has non-finite value {v} at cell {i}"
            )));
        }
        self.add_partial_column(name, values.into_iter().map(Some).collect())
    }

    /// Add a column whose `None` cells are absent (edge cells of leads/lags).
    pub fn add_partial_column(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.n_cells() {
            return Err(Error::InvalidData(format!(
                "column `{name}` has {} cells, panel has {}",
                values.len(),
                self.n_cells()
            )));
        }
        if self.has_column(name) {
            return Err(Error::InvalidSpec(format!("column `{name}` already exists")));
        }
        self.columns.push((name.to_string(), values));
        Ok(())
    }

    /// Insert or overwrite a fully observed column.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.columns.retain(|(n, _)| n != name);
        self.add_column(name, values)
    }

    pub fn cells(&self, name: &str) -> Result<&[Option<f64>]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Values of a column that must be present in every cell.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let cells = self.cells(name)?;
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| {
                    let (e, t) = (i / self.n_times(), i % self.n_times());
                    Error::InvalidData(format!(
                        "column `{name}` is absent for entity `{}` in year {}; restrict the window first",
                        self.entities[e], self.times[t]
                    ))
                })
            })
            .collect()
    }

    /// Entity position of every cell.
    pub fn entity_of_cell(&self) -> Vec<usize> {
        let t = self.n_times();
        (0..self.n_cells()).map(|i| i / t).collect()
    }

    /// Dense cluster index per entity and the number of clusters.
    pub fn cluster_index(&self) -> (Vec<usize>, usize) {
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let idx = self
            .clusters
            .iter()
            .map(|c| {
                let next = ids.len();
                *ids.entry(c.as_str()).or_insert(next)
            })
            .collect();
        (idx, ids.len())
    }

    /// Panel restricted to the listed entity positions, in the given order.
    ///
    /// Positions may repeat (bootstrap draws); repeated entities get fresh
    /// labels `name#k` and their own cluster label so each draw is a
    /// separate unit.
    pub fn select_entities(&self, positions: &[usize]) -> Panel {
        let t = self.n_times();
        let mut count: HashMap<usize, usize> = HashMap::new();
        let mut entities = Vec::with_capacity(positions.len());
        let mut clusters = Vec::with_capacity(positions.len());
        for &p in positions {
            let k = count.entry(p).or_insert(0);
            if *k == 0 {
                entities.push(self.entities[p].clone());
                clusters.push(self.clusters[p].clone());
            } else {
                entities.push(format!("{}#{}", self.entities[p], k));
                clusters.push(format!("{}#{}", self.clusters[p], k));
            }
            *k += 1;
        }
        let columns = self
            .columns
            .iter()
            .map(|(name, v)| {
                let mut out = Vec::with_capacity(positions.len() * t);
                for &p in positions {
                    out.extend_from_slice(&v[p * t..(p + 1) * t]);
                }
                (name.clone(), out)
            })
            .collect();
        Panel {
            entities,
            clusters,
            times: self.times.clone(),
            columns,
        }
    }

    /// Panel restricted to years `from..=to`.
    pub fn window(&self, from: i64, to: i64) -> Result<Panel> {
        let lo = self.times.iter().position(|&y| y == from);
        let hi = self.times.iter().position(|&y| y == to);
        match (lo, hi) {
            (Some(lo), Some(hi)) if lo <= hi => Ok(self.slice_times(lo, hi + 1)),
            _ => Err(Error::InvalidSpec(format!(
                "window {from}:{to} is not inside the panel years {}..{}",
                self.times[0],
                self.times[self.n_times() - 1]
            ))),
        }
    }

    fn slice_times(&self, lo: usize, hi: usize) -> Panel {
        let t = self.n_times();
        let columns = self
            .columns
            .iter()
            .map(|(name, v)| {
                let out = (0..self.n_entities())
                    .flat_map(|e| v[e * t + lo..e * t + hi].iter().copied())
                    .collect();
                (name.clone(), out)
            })
            .collect();
        Panel {
            entities: self.entities.clone(),
            clusters: self.clusters.clone(),
            times: self.times[lo..hi].to_vec(),
            columns,
        }
    }

    /// Drop the edge years in which any of `names` is absent for any entity.
    ///
    /// The years that remain must be contiguous; absent cells in the interior
    /// of the panel are an error since deleting them would unbalance it.
    pub fn complete_window(&self, names: &[String]) -> Result<Panel> {
        let t = self.n_times();
        let mut ok = vec![true; t];
        for name in names {
            let cells = self.cells(name)?;
            for (i, c) in cells.iter().enumerate() {
                if c.is_none() {
                    ok[i % t] = false;
                }
            }
        }
        let first = ok.iter().position(|&b| b);
        let last = ok.iter().rposition(|&b| b);
        match (first, last) {
            (Some(lo), Some(hi)) => {
                if ok[lo..=hi].iter().any(|&b| !b) {
                    return Err(Error::InvalidData(
                        "absent cells inside the panel window; only edge years may be absent".into(),
                    ));
                }
                Ok(self.slice_times(lo, hi + 1))
            }
            _ => Err(Error::InvalidData("no year has all required columns present".into())),
        }
    }

    /// Names of the year indicator columns, first year as base.
    pub fn year_dummy_names(&self) -> Vec<String> {
        self.times[1..].iter().map(|y| format!("year_{y}")).collect()
    }

    /// Copy of the panel with `T - 1` year indicators appended (first year is
    /// the base); returns the new column names.
    pub fn with_year_dummies(&self) -> Result<(Panel, Vec<String>)> {
        let mut out = self.clone();
        let names = self.year_dummy_names();
        let t = self.n_times();
        for (k, name) in names.iter().enumerate() {
            let col = (0..self.n_cells())
                .map(|i| if i % t == k + 1 { 1.0 } else { 0.0 })
                .collect();
            out.add_column(name, col)?;
        }
        Ok((out, names))
    }

    /// Previous-year value of `name`; absent in the first year.
    pub fn lagged(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let cells = self.cells(name)?;
        let t = self.n_times();
        Ok((0..self.n_cells())
            .map(|i| if i % t == 0 { None } else { cells[i - 1] })
            .collect())
    }

    /// `log y_t - log y_{t-1}` per entity; absent in the first year.
    pub fn log_diff(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let t = self.n_times();
        let mut out = vec![None; self.n_cells()];
        for e in 0..self.n_entities() {
            let series: Vec<f64> = self.cells(name)?[e * t..(e + 1) * t]
                .iter()
                .map(|c| c.ok_or_else(|| Error::InvalidData(format!("`{name}` has absent cells"))))
                .collect::<Result<_>>()?;
            let d = detrend_log_diff(&series).map_err(|err| match err {
                Error::InvalidData(msg) => Error::InvalidData(format!("entity `{}`: {msg}", self.entities[e])),
                other => other,
            })?;
            for (k, v) in d.into_iter().enumerate() {
                out[e * t + k + 1] = Some(v);
            }
        }
        Ok(out)
    }

    /// Write the panel in the `entity,year[,cluster],columns...` layout.
    ///
    /// Absent cells are written empty. The cluster column is only written
    /// when clusters differ from entities.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let with_cluster = self.clusters != self.entities;
        let mut header = vec!["entity".to_string(), "year".to_string()];
        if with_cluster {
            header.push("cluster".into());
        }
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        let t = self.n_times();
        for e in 0..self.n_entities() {
            for (k, year) in self.times.iter().enumerate() {
                let mut rec = vec![self.entities[e].clone(), year.to_string()];
                if with_cluster {
                    rec.push(self.clusters[e].clone());
                }
                for (_, v) in &self.columns {
                    rec.push(match v[e * t + k] {
                        Some(x) => format!("{x}"),
                        None => String::new(),
                    });
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Roles of the panel columns in the control-function model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub outcome: String,
    pub endogenous: String,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    #[serde(default = "default_true")]
    pub year_dummies: bool,
}

fn default_true() -> bool {
    true
}

impl FeatureSpec {
    /// All column names the spec refers to, outcome first.
    pub fn referenced(&self) -> Vec<String> {
        let mut v = vec![self.outcome.clone(), self.endogenous.clone()];
        v.extend(self.instruments.iter().cloned());
        v.extend(self.controls.iter().cloned());
        v
    }

    pub fn validate(&self, panel: &Panel) -> Result<()> {
        for name in self.referenced() {
            if !panel.has_column(&name) {
                return Err(Error::UnknownColumn(name));
            }
        }
        if self.instruments.is_empty() {
            return Err(Error::InvalidSpec("at least one instrument is required".into()));
        }
        for z in &self.instruments {
            if self.controls.contains(z) || *z == self.endogenous || *z == self.outcome {
                return Err(Error::InvalidSpec(format!(
                    "instrument `{z}` also appears as a control, outcome or endogenous variable"
                )));
            }
        }
        let mut seen = HashSet::new();
        for name in self.referenced() {
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidSpec(format!("column `{name}` is used twice")));
            }
        }
        Ok(())
    }
}

/// Read a comma-separated panel.
///
/// Required header columns are `entity` and `year`; an optional `cluster`
/// column assigns clusters (constant within entity). `columns` lists the
/// numeric columns to keep; `None` keeps every other column. Rows are sorted
/// by entity then year. Empty cells are read as absent.
pub fn load_panel<R: Read>(reader: R, columns: Option<&[String]>) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let entity_col = find("entity").ok_or_else(|| Error::UnknownColumn("entity".into()))?;
    let year_col = find("year").ok_or_else(|| Error::UnknownColumn("year".into()))?;
    let cluster_col = find("cluster");

    let wanted: Vec<(String, usize)> = match columns {
        Some(names) => names
            .iter()
            .map(|n| {
                find(n)
                    .map(|i| (n.clone(), i))
                    .ok_or_else(|| Error::UnknownColumn(n.clone()))
            })
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != entity_col && *i != year_col && Some(*i) != cluster_col)
            .map(|(i, h)| (h.to_string(), i))
            .collect(),
    };
    {
        let mut seen = HashSet::new();
        for (n, _) in &wanted {
            if !seen.insert(n) {
                return Err(Error::InvalidSpec(format!("column `{n}` declared twice")));
            }
        }
    }

    let mut rows: BTreeMap<(String, i64), Vec<Option<f64>>> = BTreeMap::new();
    let mut cluster_of: BTreeMap<String, String> = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let entity = rec.get(entity_col).unwrap_or("").to_string();
        let year_raw = rec.get(year_col).unwrap_or("");
        let year: i64 = year_raw.parse().map_err(|_| Error::NonNumeric {
            row,
            column: "year".into(),
            value: year_raw.into(),
        })?;
        if let Some(c) = cluster_col {
            let label = rec.get(c).unwrap_or("").to_string();
            match cluster_of.get(&entity) {
                Some(prev) if *prev != label => {
                    return Err(Error::InvalidData(format!(
                        "entity `{entity}` has more than one cluster label"
                    )))
                }
                _ => {
                    cluster_of.insert(entity.clone(), label);
                }
            }
        }
        let vals = wanted
            .iter()
            .map(|(name, i)| {
                let raw = rec.get(*i).unwrap_or("");
                if raw.is_empty() {
                    return Ok(None);
                }
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Some)
                    .ok_or_else(|| Error::NonNumeric {
                        row,
                        column: name.clone(),
                        value: raw.into(),
                    })
            })
            .collect::<Result<Vec<Option<f64>>>>()?;
        if rows.insert((entity.clone(), year), vals).is_some() {
            return Err(Error::DuplicateRow { entity, year });
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("no data rows".into()));
    }

    let entities: Vec<String> = {
        let mut v: Vec<String> = rows.keys().map(|(e, _)| e.clone()).collect();
        v.dedup();
        v
    };
    let min_year = rows.keys().map(|(_, y)| *y).min().unwrap_or(0);
    let max_year = rows.keys().map(|(_, y)| *y).max().unwrap_or(0);
    let times: Vec<i64> = (min_year..=max_year).collect();
    for e in &entities {
        for &y in &times {
            if !rows.contains_key(&(e.clone(), y)) {
                return Err(Error::Unbalanced {
                    entity: e.clone(),
                    year: y,
                });
            }
        }
    }

    let clusters = if cluster_col.is_some() {
        entities.iter().map(|e| cluster_of[e].clone()).collect()
    } else {
        entities.clone()
    };
    let mut panel = Panel::new(entities, times)?.with_clusters(clusters)?;
    let ordered: Vec<&Vec<Option<f64>>> = rows.values().collect();
    for (j, (name, _)) in wanted.iter().enumerate() {
        let col: Vec<Option<f64>> = ordered.iter().map(|r| r[j]).collect();
        if col.iter().all(Option::is_some) {
            panel.add_column(name, col.into_iter().flatten().collect())?;
        } else {
            panel.add_partial_column(name, col)?;
        }
    }
    Ok(panel)
}

/// Outcome of [`filter_nonzero_outcome`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: Vec<String>,
    pub dropped_fraction: f64,
}

/// Keep the entities with at least one strictly positive outcome.
pub fn filter_nonzero_outcome(panel: &Panel, outcome: &str) -> Result<(Panel, FilterReport)> {
    let y = panel.values(outcome)?;
    if let Some(v) = y.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
        return Err(Error::InvalidData(format!(
            "outcome `{outcome}` must hold nonnegative integers, found {v}"
        )));
    }
    let t = panel.n_times();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for e in 0..panel.n_entities() {
        if y[e * t..(e + 1) * t].iter().any(|v| *v > 0.0) {
            keep.push(e);
        } else {
            dropped.push(panel.entities()[e].clone());
        }
    }
    if keep.is_empty() {
        return Err(Error::NoInformativeEntities);
    }
    let report = FilterReport {
        kept: keep.len(),
        dropped_fraction: dropped.len() as f64 / panel.n_entities() as f64,
        dropped,
    };
    let out = if report.dropped.is_empty() {
        panel.clone()
    } else {
        panel.select_entities(&keep)
    };
    Ok((out, report))
}

/// Recalls per hundred products, `m / n_products * 100`.
pub fn normalize_recalls(recalls: &[f64], n_products: &[f64]) -> Result<Vec<f64>> {
    if recalls.len() != n_products.len() {
        return Err(Error::InvalidData("recall and product series differ in length".into()));
    }
    recalls
        .iter()
        .zip(n_products)
        .enumerate()
        .map(|(i, (&m, &p))| {
            if m == 0.0 {
                Ok(0.0)
            } else if p > 0.0 {
                Ok(m / p * 100.0)
            } else {
                Err(Error::InvalidData(format!(
                    "{m} recalls with {p} products at position {i}"
                )))
            }
        })
        .collect()
}

/// Herfindahl-Hirschman index of market shares.
pub fn hhi(shares: &[f64]) -> Result<f64> {
    if shares.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidData("market shares must be nonnegative".into()));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidData(format!("market shares sum to {total}, not 1")));
    }
    Ok(shares.iter().map(|s| s * s).sum())
}

/// Products lost before the next year over products present the year before.
pub fn outflow_rate(lost_next: f64, total_prev: f64) -> Result<f64> {
    if total_prev <= 0.0 {
        return Err(Error::InvalidData(format!(
            "outflow rate needs a positive previous product count, got {total_prev}"
        )));
    }
    Ok(lost_next / total_prev)
}

/// Outflow rate for every cell: `exits[t] / products[t-1]`, where `exits[t]`
/// counts products present in `t` and gone in `t+1`. Absent in the first year
/// and wherever `exits` is absent (typically the last year).
pub fn outflow_rate_column(panel: &Panel, exits: &str, products: &str) -> Result<Vec<Option<f64>>> {
    let k = panel.cells(exits)?;
    let p = panel.cells(products)?;
    let t = panel.n_times();
    (0..panel.n_cells())
        .map(|i| {
            if i % t == 0 {
                return Ok(None);
            }
            match (k[i], p[i - 1]) {
                (Some(lost), Some(prev)) => outflow_rate(lost, prev).map(Some),
                _ => Ok(None),
            }
        })
        .collect()
}

/// First difference of the log of a positive series (length `T - 1`).
pub fn detrend_log_diff(series: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = series.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidData(format!(
            "log difference needs positive values, found {v}"
        )));
    }
    Ok(series.windows(2).map(|w| w[1].ln() - w[0].ln()).collect())
}

/// Subtract group means from every column; `groups[r]` is the group of row `r`.
pub fn within_demean(columns: &Array2<f64>, groups: &[usize]) -> Array2<f64> {
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    group_demean(columns, groups, n_groups).0
}

/// Demeaned matrix and the `n_groups x k` matrix of group means.
pub(crate) fn group_demean(columns: &Array2<f64>, groups: &[usize], n_groups: usize) -> (Array2<f64>, Array2<f64>) {
    let k = columns.ncols();
    let mut sums = Array2::<f64>::zeros((n_groups, k));
    let mut counts = vec![0usize; n_groups];
    for (r, &g) in groups.iter().enumerate() {
        counts[g] += 1;
        for j in 0..k {
            sums[[g, j]] += columns[[r, j]];
        }
    }
    for g in 0..n_groups {
        if counts[g] > 0 {
            for j in 0..k {
                sums[[g, j]] /= counts[g] as f64;
            }
        }
    }
    let mut out = columns.clone();
    for (r, &g) in groups.iter().enumerate() {
        for j in 0..k {
            out[[r, j]] -= sums[[g, j]];
        }
    }
    (out, sums)
}
