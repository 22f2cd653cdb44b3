//! System GMM for `y_it = a y_i,t-1 + b' x_it + c_i + e_it`.
//!
//! Each entity contributes `E = T - 2` differenced equations (years 2..T-1
//! in panel order) stacked over `E` level equations for the same years.
//! Lagged levels instrument the differenced equations and lagged first
//! differences instrument the level equations ("GMM-style"); exogenous
//! regressors, year dummies and the constant instrument themselves, with the
//! differenced value in the differenced rows and the level in the level rows
//! ("IV-style").
//!
//! The one-step weight is `(sum_i Z_i' H Z_i)^{-1}` with `H` block diagonal:
//! the tridiagonal `2, -1` matrix for the differenced rows and the identity
//! for the level rows. Two-step re-weights with `(sum_i Z_i' e_i e_i' Z_i)^{-1}`
//! from one-step residuals. Two-step standard errors are the textbook
//! `(X'Z W Z'X)^{-1}` without a finite-sample correction.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{chi2_sf, normal_two_sided, Coefficients, Covariance, CovarianceKind};
use crate::linalg::{inv_spd, symmetrize};
use crate::panel::Panel;

/// Which weighting matrix the reported coefficients use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmSpec {
    pub dependent: String,
    /// Regressors instrumented GMM-style like the lagged dependent variable.
    pub endogenous: Vec<String>,
    /// Regressors that instrument themselves.
    pub exogenous: Vec<String>,
    /// Excluded instruments entered IV-style.
    pub instruments: Vec<String>,
    pub lag_min: usize,
    /// Deepest lag; `None` uses every available lag.
    pub lag_max: Option<usize>,
    /// `None` collapses when the uncollapsed count would exceed `N / 2`.
    pub collapse: Option<bool>,
    pub year_dummies: bool,
    pub constant: bool,
    /// Stack the level equations; `false` gives difference GMM (no constant).
    pub levels: bool,
}

impl Default for GmmSpec {
    fn default() -> Self {
        GmmSpec {
            dependent: "y".into(),
            endogenous: Vec::new(),
            exogenous: Vec::new(),
            instruments: Vec::new(),
            lag_min: 2,
            lag_max: None,
            collapse: None,
            year_dummies: true,
            constant: true,
            levels: true,
        }
    }
}

/// GMM-style instruments for one variable, rows ordered as the stacked
/// equations of one entity after another.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentBlocks {
    pub labels: Vec<String>,
    /// `(N * 2E) x L`.
    pub matrix: Array2<f64>,
    /// Columns for the differenced equations come first.
    pub n_diff: usize,
}

impl InstrumentBlocks {
    pub fn n_columns(&self) -> usize {
        self.labels.len()
    }
}

/// GMM-style instrument blocks for `var`.
///
/// Differenced equation for year index `k` uses levels `v_{k-l}` for
/// `l` in `lag_min..=lag_max` that exist; the level equation uses
/// `dv_{k-lag_min+1}`. Uncollapsed, each (equation year, lag) pair is its
/// own column; collapsed, one column per lag.
pub fn build_gmm_instruments(
    panel: &Panel,
    var: &str,
    lag_min: usize,
    lag_max: usize,
    collapse: bool,
) -> Result<InstrumentBlocks> {
    let t = panel.n_times();
    if t < 3 {
        return Err(Error::InsufficientPeriods(format!(
            "system GMM needs at least 3 years, got {t}"
        )));
    }
    if lag_min < 2 || lag_min > lag_max || lag_min > t - 1 {
        return Err(Error::InvalidSpec(format!(
            "empty lag window {lag_min}..{lag_max} for {t} years (need 2 <= min <= max, min <= T-1)"
        )));
    }
    let lag_max = lag_max.min(t - 1);
    let v = panel.values(var)?;
    let n = panel.n_entities();
    let e = t - 2;
    let years = panel.times();

    // (label, equation k, lag) per diff column; level columns keyed by k
    let mut diff_cols: Vec<(String, Option<usize>, usize)> = Vec::new();
    if collapse {
        for l in lag_min..=lag_max {
            diff_cols.push((format!("L{l}.{var}"), None, l));
        }
    } else {
        for k in 2..t {
            for l in lag_min..=lag_max.min(k) {
                diff_cols.push((format!("L{l}.{var}@{}", years[k]), Some(k), l));
            }
        }
    }
    let lvl_lag = lag_min - 1;
    let level_cols: Vec<(String, Option<usize>)> = if collapse {
        vec![(format!("DL{lvl_lag}.{var}"), None)]
    } else {
        (2..t)
            .filter(|&k| k > lvl_lag)
            .map(|k| (format!("DL{lvl_lag}.{var}@{}", years[k]), Some(k)))
            .collect()
    };
    let n_diff = diff_cols.len();
    let width = n_diff + level_cols.len();
    let mut m = Array2::<f64>::zeros((n * 2 * e, width));
    for i in 0..n {
        let base = i * t;
        for k in 2..t {
            let row_d = i * 2 * e + (k - 2);
            let row_l = row_d + e;
            for (c, (_, at, l)) in diff_cols.iter().enumerate() {
                if at.is_none_or(|a| a == k) && *l <= k {
                    m[[row_d, c]] = v[base + k - l];
                }
            }
            if k > lvl_lag {
                let j = k - lvl_lag;
                let dv = v[base + j] - v[base + j - 1];
                for (c, (_, at)) in level_cols.iter().enumerate() {
                    if at.is_none_or(|a| a == k) {
                        m[[row_l, n_diff + c]] = dv;
                    }
                }
            }
        }
    }
    let labels = diff_cols
        .into_iter()
        .map(|c| c.0)
        .chain(level_cols.into_iter().map(|c| c.0))
        .collect();
    Ok(InstrumentBlocks {
        labels,
        matrix: m,
        n_diff,
    })
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub names: Vec<String>,
    pub coef: Array1<f64>,
    pub cov: Covariance,
    pub step: Step,
    pub collapsed: bool,
    pub instrument_labels: Vec<String>,
    pub n_entities: usize,
    pub n_years: usize,
    /// Equations per entity and block (`T - 2`).
    pub n_eq: usize,
    /// Stacked rows per entity: `2 E`, or `E` for difference GMM.
    pub rows_per_entity: usize,
    pub warnings: Vec<String>,
    /// Stacked instruments, regressors and outcome, `N * 2E` rows.
    pub z: Array2<f64>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    /// Weighting matrix behind `coef`.
    pub weight: Array2<f64>,
    /// Stacked residuals at `coef`.
    pub resid: Array1<f64>,
    /// Level residuals `y_k - a y_{k-1} - b'x_k - const` for years 1..T-1,
    /// `N x (T-1)`; they include `c_i`.
    pub level_resid: Array2<f64>,
    /// Differenced residuals for years 2..T-1, `N x (T-2)`.
    pub diff_resid: Array2<f64>,
    pub one_step_coef: Array1<f64>,
    pub two_step_coef: Array1<f64>,
    /// `(sum_i Z_i' e_i e_i' Z_i)^{-1}` from one-step residuals.
    pub two_step_weight: Array2<f64>,
}

impl Coefficients for GmmFit {
    fn names(&self) -> &[String] {
        &self.names
    }
    fn coefficients(&self) -> &Array1<f64> {
        &self.coef
    }
}

impl GmmFit {
    pub fn n_instruments(&self) -> usize {
        self.z.ncols()
    }

    fn rows(&self, i: usize) -> std::ops::Range<usize> {
        i * self.rows_per_entity..(i + 1) * self.rows_per_entity
    }
}

fn block_h(e: usize) -> Array2<f64> {
    let mut h = Array2::<f64>::zeros((2 * e, 2 * e));
    for k in 0..e {
        h[[k, k]] = 2.0;
        if k + 1 < e {
            h[[k, k + 1]] = -1.0;
            h[[k + 1, k]] = -1.0;
        }
        h[[e + k, e + k]] = 1.0;
    }
    h
}

fn moment_cov(z: &Array2<f64>, u: &Array1<f64>, n: usize, rows: usize) -> Array2<f64> {
    let l = z.ncols();
    let mut s = Array2::<f64>::zeros((l, l));
    for i in 0..n {
        let zi = z.slice(s![i * rows..(i + 1) * rows, ..]);
        let g = zi.t().dot(&u.slice(s![i * rows..(i + 1) * rows]));
        let g = g.insert_axis(Axis(1));
        s += &g.dot(&g.t());
    }
    s
}

struct Solved {
    coef: Array1<f64>,
    /// `(X'Z W Z'X)^{-1}`.
    bread: Array2<f64>,
}

fn solve_gmm(zx: &Array2<f64>, zy: &Array1<f64>, w: &Array2<f64>) -> Result<Solved> {
    let a = zx.t().dot(w);
    let bread = inv_spd(&a.dot(zx), "GMM normal equations")?;
    Ok(Solved {
        coef: bread.dot(&a.dot(zy)),
        bread,
    })
}

/// Fit the system. Rows use years with index 2..T-1.
pub fn fit_system_gmm(panel: &Panel, spec: &GmmSpec, step: Step) -> Result<GmmFit> {
    let t = panel.n_times();
    let n = panel.n_entities();
    if t < 4 {
        return Err(Error::InsufficientPeriods(format!(
            "system GMM with a lagged dependent variable needs at least 4 years, got {t}"
        )));
    }
    let e = t - 2;
    let rows = 2 * e;
    let spec = &GmmSpec {
        constant: spec.constant && spec.levels,
        ..spec.clone()
    };
    let lag_max = spec.lag_max.unwrap_or(t - 1).min(t - 1);
    let gmm_vars: Vec<&String> = std::iter::once(&spec.dependent).chain(&spec.endogenous).collect();

    let mut warnings = Vec::new();
    let collapsed = match spec.collapse {
        Some(c) => c,
        None => {
            let mut count = 0;
            for v in &gmm_vars {
                count += build_gmm_instruments(panel, v, spec.lag_min, lag_max, false)?.n_columns();
            }
            count += spec.exogenous.len() + spec.instruments.len() + usize::from(spec.constant);
            if count > n / 2 {
                warnings.push(format!("{count} instruments exceed N/2 = {}; collapsing", n / 2));
                true
            } else {
                false
            }
        }
    };

    let y_all = panel.values(&spec.dependent)?;
    let endo: Vec<Vec<f64>> = spec.endogenous.iter().map(|v| panel.values(v)).collect::<Result<_>>()?;
    let exo: Vec<Vec<f64>> = spec.exogenous.iter().map(|v| panel.values(v)).collect::<Result<_>>()?;
    let excluded: Vec<Vec<f64>> = spec
        .instruments
        .iter()
        .map(|v| panel.values(v))
        .collect::<Result<_>>()?;
    let n_ivvars = exo.len() + excluded.len();
    let years = panel.times();
    let dummy_ks: Vec<usize> = if spec.year_dummies {
        (if spec.constant { 3 } else { 2 }..t).collect()
    } else {
        Vec::new()
    };

    let mut names = vec![format!("L1.{}", spec.dependent)];
    names.extend(spec.endogenous.iter().cloned());
    names.extend(spec.exogenous.iter().cloned());
    names.extend(dummy_ks.iter().map(|&k| format!("year_{}", years[k])));
    if spec.constant {
        names.push("const".into());
    }
    let kx = names.len();

    let mut x = Array2::<f64>::zeros((n * rows, kx));
    let mut y = Array1::<f64>::zeros(n * rows);
    // IV-style block: exogenous, excluded, dummies, constant
    let n_iv = n_ivvars + dummy_ks.len() + usize::from(spec.constant);
    let mut iv = Array2::<f64>::zeros((n * rows, n_iv));
    for i in 0..n {
        let b = i * t;
        for k in 2..t {
            let rd = i * rows + k - 2;
            let rl = rd + e;
            y[rd] = y_all[b + k] - y_all[b + k - 1];
            y[rl] = y_all[b + k];
            x[[rd, 0]] = y_all[b + k - 1] - y_all[b + k - 2];
            x[[rl, 0]] = y_all[b + k - 1];
            let mut c = 1;
            for col in endo.iter().chain(&exo) {
                x[[rd, c]] = col[b + k] - col[b + k - 1];
                x[[rl, c]] = col[b + k];
                c += 1;
            }
            for (j, col) in exo.iter().chain(&excluded).enumerate() {
                iv[[rd, j]] = col[b + k] - col[b + k - 1];
                iv[[rl, j]] = col[b + k];
            }
            for (j, &dk) in dummy_ks.iter().enumerate() {
                let now = f64::from(u8::from(k == dk));
                let before = f64::from(u8::from(k - 1 == dk));
                x[[rd, c]] = now - before;
                x[[rl, c]] = now;
                iv[[rd, n_ivvars + j]] = now - before;
                iv[[rl, n_ivvars + j]] = now;
                c += 1;
            }
            if spec.constant {
                x[[rl, c]] = 1.0;
                iv[[rl, n_iv - 1]] = 1.0;
            }
        }
    }

    let mut labels = Vec::new();
    let mut blocks: Vec<Array2<f64>> = Vec::new();
    for v in &gmm_vars {
        let b = build_gmm_instruments(panel, v, spec.lag_min, lag_max, collapsed)?;
        labels.extend(b.labels);
        blocks.push(b.matrix);
    }
    labels.extend(spec.exogenous.iter().cloned());
    labels.extend(spec.instruments.iter().cloned());
    labels.extend(dummy_ks.iter().map(|&k| format!("year_{}", years[k])));
    if spec.constant {
        labels.push("const".into());
    }
    blocks.push(iv);
    let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
    let mut z = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
    let (mut x, mut y, rows) = (x, y, if spec.levels { rows } else { e });
    if !spec.levels {
        let keep_rows: Vec<usize> = (0..n).flat_map(|i| i * 2 * e..i * 2 * e + e).collect();
        z = z.select(Axis(0), &keep_rows);
        x = x.select(Axis(0), &keep_rows);
        y = y.select(Axis(0), &keep_rows);
        let keep_cols: Vec<usize> = (0..z.ncols())
            .filter(|&c| z.column(c).iter().any(|v| *v != 0.0))
            .collect();
        z = z.select(Axis(1), &keep_cols);
        labels = keep_cols.iter().map(|&c| labels[c].clone()).collect();
    }
    let l = z.ncols();
    if l < kx {
        return Err(Error::InvalidSpec(format!(
            "{l} instruments cannot identify {kx} coefficients"
        )));
    }
    if l >= n {
        warnings.push(format!(
            "{l} instruments for {n} entities; the two-step weight is poorly estimated"
        ));
    }

    let h = block_h(e).slice(s![..rows, ..rows]).to_owned();
    let mut zhz = Array2::<f64>::zeros((l, l));
    for i in 0..n {
        let zi = z.slice(s![i * rows..(i + 1) * rows, ..]);
        zhz += &zi.t().dot(&h.dot(&zi));
    }
    let singular = |err: Error| match err {
        Error::Singular(m) => Error::Singular(format!("{m}; try collapsing the instruments")),
        other => other,
    };
    let w1 = inv_spd(&zhz, "one-step weighting matrix").map_err(singular)?;
    let zx = z.t().dot(&x);
    let zy = z.t().dot(&y);
    let one = solve_gmm(&zx, &zy, &w1)?;
    let u1 = &y - &x.dot(&one.coef);
    let s1 = moment_cov(&z, &u1, n, rows);
    let w2 = inv_spd(&s1, "two-step weighting matrix").map_err(singular)?;
    let two = solve_gmm(&zx, &zy, &w2)?;

    let (coef, weight, matrix) = match step {
        Step::One => {
            let a = one.bread.dot(&zx.t()).dot(&w1);
            let mut v = a.dot(&s1).dot(&a.t());
            symmetrize(&mut v);
            (one.coef.clone(), w1, v)
        }
        Step::Two => (two.coef.clone(), w2.clone(), two.bread.clone()),
    };
    let resid = &y - &x.dot(&coef);

    // level residuals from year 1 on, and their differences
    let mut level_resid = Array2::<f64>::zeros((n, t - 1));
    for i in 0..n {
        let b = i * t;
        for k in 1..t {
            let mut fit = coef[0] * y_all[b + k - 1];
            let mut c = 1;
            for col in endo.iter().chain(&exo) {
                fit += coef[c] * col[b + k];
                c += 1;
            }
            for &dk in &dummy_ks {
                if k == dk {
                    fit += coef[c];
                }
                c += 1;
            }
            if spec.constant {
                fit += coef[c];
            }
            level_resid[[i, k - 1]] = y_all[b + k] - fit;
        }
    }
    let mut diff_resid = Array2::<f64>::zeros((n, e));
    for i in 0..n {
        for k in 0..e {
            diff_resid[[i, k]] = resid[i * rows + k];
        }
    }

    Ok(GmmFit {
        names,
        coef,
        cov: Covariance {
            matrix,
            kind: CovarianceKind::ClusterRobust,
            n_clusters: n,
            small_sample_factor: 1.0,
        },
        step,
        collapsed,
        instrument_labels: labels,
        n_entities: n,
        n_years: t,
        n_eq: e,
        rows_per_entity: rows,
        warnings,
        z,
        x,
        y,
        weight,
        resid,
        level_resid,
        diff_resid,
        one_step_coef: one.coef,
        two_step_coef: two.coef,
        two_step_weight: w2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HansenJ {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Minimised two-step criterion `g' W2 g`, `g = sum_i Z_i' e_i` at the
/// two-step coefficients, whichever step the fit reports.
pub fn hansen_j(fit: &GmmFit) -> Result<HansenJ> {
    let l = fit.n_instruments();
    let k = fit.coef.len();
    if l <= k {
        return Err(Error::ExactlyIdentified);
    }
    let u = &fit.y - &fit.x.dot(&fit.two_step_coef);
    let g = fit.z.t().dot(&u);
    let statistic = g.dot(&fit.two_step_weight.dot(&g));
    let df = l - k;
    Ok(HansenJ {
        statistic,
        df,
        p_value: chi2_sf(statistic, df as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArTest {
    pub order: usize,
    pub z: f64,
    pub p_value: f64,
}

/// Arellano-Bond test for order-`m` autocorrelation of the differenced
/// residuals, with the variance terms for the estimated coefficients.
pub fn ar_test(fit: &GmmFit, order: usize) -> Result<ArTest> {
    let e = fit.n_eq;
    if order == 0 || order >= e {
        return Err(Error::InsufficientPeriods(format!(
            "AR({order}) needs more than {order} differenced equations per entity, have {e}"
        )));
    }
    let n = fit.n_entities;
    let rows = fit.rows_per_entity;
    let k = fit.coef.len();
    // influence of the coefficients on the moment sum: b - b0 = A sum_i Z_i' e_i
    let zx = fit.z.t().dot(&fit.x);
    let a = fit.cov_bread(&zx).dot(&zx.t()).dot(&fit.weight);

    let mut num = 0.0;
    let mut sum_w2 = 0.0;
    let mut lag_x = Array1::<f64>::zeros(k);
    let mut zeu = Array1::<f64>::zeros(fit.n_instruments());
    for i in 0..n {
        let r = fit.rows(i);
        let u = fit.resid.slice(s![r.clone()]);
        let mut w = 0.0;
        for kk in order..e {
            let lagged = u[kk - order];
            w += lagged * u[kk];
            lag_x.scaled_add(lagged, &fit.x.row(i * rows + kk));
        }
        num += w;
        sum_w2 += w * w;
        let zi = fit.z.slice(s![r, ..]);
        zeu.scaled_add(w, &zi.t().dot(&u));
    }
    let var = sum_w2 - 2.0 * lag_x.dot(&a.dot(&zeu)) + lag_x.dot(&fit.cov.matrix.dot(&lag_x));
    if !(var > 0.0) {
        return Err(Error::Singular(format!("AR({order}) variance is {var}")));
    }
    let z = num / var.sqrt();
    Ok(ArTest {
        order,
        z,
        p_value: normal_two_sided(z),
    })
}

impl GmmFit {
    fn cov_bread(&self, zx: &Array2<f64>) -> Array2<f64> {
        let m = zx.t().dot(&self.weight).dot(zx);
        inv_spd(&m, "GMM normal equations").expect("inverted during fitting")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_ar_panel, ArDgpParams};

    fn ar(n: usize, t: usize, seed: u64) -> Panel {
        simulate_ar_panel(&ArDgpParams {
            n_entities: n,
            n_periods: t,
            seed,
            ..ArDgpParams::default()
        })
        .unwrap()
    }

    #[test]
    fn collapsed_single_lag_has_two_columns() {
        let b = build_gmm_instruments(&ar(5, 4, 1), "y", 2, 2, true).unwrap();
        assert_eq!(b.n_columns(), 2);
        assert_eq!(b.n_diff, 1);
    }

    #[test]
    fn uncollapsed_count_matches_enumeration() {
        let t = 5;
        let b = build_gmm_instruments(&ar(5, t, 1), "y", 2, 4, false).unwrap();
        let mut pairs = 0;
        for k in 2..t {
            for l in 2..=4 {
                if l <= k {
                    pairs += 1;
                }
            }
        }
        assert_eq!(b.n_diff, pairs);
        assert_eq!(b.n_columns(), pairs + (t - 2));
    }

    #[test]
    fn empty_lag_window_is_an_error() {
        let p = ar(5, 4, 1);
        assert!(build_gmm_instruments(&p, "y", 4, 4, true).is_err());
        assert!(build_gmm_instruments(&p, "y", 1, 3, true).is_err());
        assert!(build_gmm_instruments(&p, "y", 3, 2, true).is_err());
    }

    #[test]
    fn exactly_identified_steps_agree() {
        let spec = GmmSpec {
            lag_max: Some(2),
            collapse: Some(true),
            year_dummies: false,
            levels: false,
            ..GmmSpec::default()
        };
        let p = ar(100, 5, 3);
        let a = fit_system_gmm(&p, &spec, Step::One).unwrap();
        let b = fit_system_gmm(&p, &spec, Step::Two).unwrap();
        assert_eq!(a.n_instruments(), a.coef.len());
        assert!((a.coef[0] - b.coef[0]).abs() <= 1e-8);
        assert!(matches!(hansen_j(&a), Err(Error::ExactlyIdentified)));
    }

    #[test]
    fn differenced_residuals_are_differences_of_levels() {
        let p = ar(30, 6, 4);
        let fit = fit_system_gmm(&p, &GmmSpec::default(), Step::Two).unwrap();
        for i in 0..30 {
            for k in 0..fit.n_eq {
                let d = fit.level_resid[[i, k + 1]] - fit.level_resid[[i, k]];
                assert!((d - fit.diff_resid[[i, k]]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn j_degrees_of_freedom() {
        let p = ar(60, 6, 5);
        let fit = fit_system_gmm(&p, &GmmSpec::default(), Step::One).unwrap();
        let j = hansen_j(&fit).unwrap();
        assert_eq!(j.df, fit.n_instruments() - fit.coef.len());
    }

    #[test]
    fn ar_order_limits() {
        let p = ar(60, 4, 6);
        let spec = GmmSpec {
            year_dummies: false,
            ..GmmSpec::default()
        };
        let fit = fit_system_gmm(&p, &spec, Step::One).unwrap();
        assert!(ar_test(&fit, 1).is_ok());
        assert!(ar_test(&fit, 2).is_err());
    }
}
