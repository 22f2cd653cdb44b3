//! Serializable summaries, the conventions block every report carries, and
//! plain SVG figures.
//!
//! Figures hold no timestamps or random ids, so identical inputs give
//! identical bytes.

use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::inference::{normal_two_sided, Covariance};

/// Numerical conventions behind every reported number.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conventions {
    pub within_dof: &'static str,
    pub linear_cluster_factor: &'static str,
    pub poisson_cluster_factor: &'static str,
    pub first_stage_f_reference: &'static str,
    pub wald_reference: &'static str,
    pub second_stage_se: &'static str,
    pub event_average: &'static str,
    pub forecast_variance: &'static str,
    pub gmm_two_step_se: &'static str,
    pub gmm_initial_weight: &'static str,
    pub survival_ties: &'static str,
    pub rank_tolerance: f64,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            within_dof: "n - k - N (N = number of entities)",
            linear_cluster_factor: "G/(G-1) * (n-1)/(n-k)",
            poisson_cluster_factor: "G/(G-1)",
            first_stage_f_reference: "Wald form divided by q, referred to F(q, G-1)",
            wald_reference: "chi-square with 1 df",
            second_stage_se: "cluster sandwich, no correction for the generated first-stage residual",
            event_average: "mean over contributing units: sum AV / N_tau; Var = sum Var(AV) / N_tau^2",
            forecast_variance: "sigma^2 + x~' V x~ unless residual-only is requested",
            gmm_two_step_se: "uncorrected (no finite-sample correction)",
            gmm_initial_weight: "H = tridiagonal(2, -1) for differenced rows, identity for level rows",
            survival_ties: "deaths removed before censorings at tied times",
            rank_tolerance: crate::linalg::RANK_TOL,
        }
    }
}

/// Reference distribution for coefficient p-values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Normal,
    StudentT(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
}

pub fn coef_table(names: &[String], coef: &[f64], cov: &Covariance, reference: Reference) -> Vec<CoefRow> {
    let se = cov.standard_errors();
    names
        .iter()
        .zip(coef)
        .zip(se)
        .map(|((name, &estimate), std_error)| {
            let statistic = estimate / std_error;
            let p_value = match reference {
                Reference::Normal => normal_two_sided(statistic),
                Reference::StudentT(df) => {
                    let d = StudentsT::new(0.0, 1.0, df).expect("positive df");
                    2.0 * d.sf(statistic.abs())
                }
            };
            CoefRow {
                name: name.clone(),
                estimate,
                std_error,
                statistic,
                p_value,
            }
        })
        .collect()
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let (mut x0, mut x1) = bounds(xs);
        let (mut y0, mut y1) = bounds(ys);
        if x1 <= x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(svg: &mut String, f: &Frame, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(ylabel),
        y = H / 2.0
    );
    for (v, anchor) in [(f.x0, "start"), (f.x1, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{}</text>"#,
            f.px(v),
            H - PAD + 16.0,
            tick(v)
        );
    }
    for v in [f.y0, f.y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            PAD - 6.0,
            f.py(v) + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Line with a shaded band: points are `(x, mean, lo, hi)`; a dashed zero
/// line is drawn when zero is in range.
pub fn band_plot_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64, f64, f64)]) -> String {
    let f = Frame::new(points.iter().map(|p| p.0), points.iter().flat_map(|p| [p.2, p.3, 0.0]));
    let mut svg = String::new();
    open(&mut svg, &f, title, xlabel, ylabel);
    if !points.is_empty() {
        let upper: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.3)))
            .collect();
        let lower: Vec<String> = points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.2)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polygon points="{} {}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
        if f.y0 <= 0.0 && f.y1 >= 0.0 {
            let _ = writeln!(
                svg,
                r#"<line x1="{PAD}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
                W - PAD,
                y = f.py(0.0)
            );
        }
        let line: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.1)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
            line.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

const COLORS: [&str; 6] = ["#08519c", "#cb181d", "#238b45", "#6a51a3", "#d94801", "#525252"];

/// Step functions starting at `(0, 1)`; each curve is a label and its
/// `(time, value)` steps.
pub fn step_plot_svg(title: &str, xlabel: &str, ylabel: &str, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::new(
        curves.iter().flat_map(|c| c.1.iter().map(|p| p.0)).chain([0.0]),
        [0.0, 1.0].into_iter(),
    );
    let mut svg = String::new();
    open(&mut svg, &f, title, xlabel, ylabel);
    for (i, (label, steps)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = vec![format!("{:.2},{:.2}", f.px(0.0), f.py(1.0))];
        let mut last = 1.0;
        for &(t, s) in steps {
            pts.push(format!("{:.2},{:.2}", f.px(t), f.py(last)));
            pts.push(format!("{:.2},{:.2}", f.px(t), f.py(s)));
            last = s;
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD,
            PAD + 16.0 * i as f64,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
