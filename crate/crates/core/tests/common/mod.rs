//! Independent reference implementations used as oracles.
//!
//! Nothing here calls into the crate's numerics: dense Gaussian elimination
//! with partial pivoting, explicit dummy-variable designs and a plain Newton
//! loop on the unconditional Poisson likelihood.

#![allow(dead_code)]

use panelcf::Panel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-300, "singular oracle system");
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// OLS of `y` on `x` plus one dummy per entity (no intercept); returns the
/// slope coefficients.
pub fn lsdv(y: &[f64], x: &[Vec<f64>], entity: &[usize], n_entities: usize) -> Vec<f64> {
    let k = x.len();
    let p = k + n_entities;
    let row = |r: usize| -> Vec<f64> {
        let mut v: Vec<f64> = x.iter().map(|c| c[r]).collect();
        v.extend((0..n_entities).map(|e| f64::from(u8::from(entity[r] == e))));
        v
    };
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (r, yr) in y.iter().enumerate() {
        let v = row(r);
        for i in 0..p {
            xty[i] += v[i] * yr;
            for j in 0..p {
                xtx[i][j] += v[i] * v[j];
            }
        }
    }
    gauss_solve(xtx, xty)[..k].to_vec()
}

/// Unconditional Poisson MLE with entity dummies by Newton's method; returns
/// the slope coefficients.
pub fn dummy_poisson(y: &[f64], x: &[Vec<f64>], entity: &[usize], n_entities: usize) -> Vec<f64> {
    let k = x.len();
    let p = k + n_entities;
    let mut theta = vec![0.0; p];
    for e in 0..n_entities {
        let (s, c) = y
            .iter()
            .zip(entity)
            .filter(|(_, en)| **en == e)
            .fold((0.0, 0.0), |(s, c), (v, _)| (s + v, c + 1.0));
        theta[k + e] = (s / c).ln();
    }
    for _ in 0..200 {
        let mut grad = vec![0.0; p];
        let mut info = vec![vec![0.0; p]; p];
        for r in 0..y.len() {
            let mut v: Vec<f64> = x.iter().map(|c| c[r]).collect();
            v.extend((0..n_entities).map(|e| f64::from(u8::from(entity[r] == e))));
            let eta: f64 = v.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let mu = eta.exp();
            for i in 0..p {
                grad[i] += (y[r] - mu) * v[i];
                for j in 0..p {
                    info[i][j] += mu * v[i] * v[j];
                }
            }
        }
        let step = gauss_solve(info, grad.clone());
        for i in 0..p {
            theta[i] += step[i];
        }
        if step.iter().fold(0.0f64, |m, s| m.max(s.abs())) < 1e-13 {
            break;
        }
    }
    theta[..k].to_vec()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random panel with columns `y` and `x1..xk` where the regressors have
/// entity-level components and `y` is linear plus noise.
pub fn random_linear_panel(rng: &mut ChaCha8Rng, n: usize, t: usize, k: usize) -> (Panel, Vec<String>) {
    let mut p = Panel::new((0..n).map(|e| format!("e{e}")).collect(), (0..t as i64).collect()).unwrap();
    let names: Vec<String> = (1..=k).map(|j| format!("x{j}")).collect();
    let mut y: Vec<f64> = (0..n)
        .flat_map(|_| {
            let a = 3.0 * rng.random::<f64>();
            std::iter::repeat_n(a, t)
        })
        .collect();
    for name in &names {
        let b = normal(rng);
        let col: Vec<f64> = (0..n * t).map(|i| normal(rng) + (i / t) as f64 * 0.3).collect();
        for (yi, xi) in y.iter_mut().zip(&col) {
            *yi += b * xi;
        }
        p.add_column(name, col).unwrap();
    }
    for v in y.iter_mut() {
        *v += 0.5 * normal(rng);
    }
    p.add_column("y", y).unwrap();
    (p, names)
}

/// Random count panel with every entity total positive.
pub fn random_count_panel(rng: &mut ChaCha8Rng, n: usize, t: usize, k: usize) -> (Panel, Vec<String>) {
    loop {
        let mut p = Panel::new((0..n).map(|e| format!("e{e}")).collect(), (0..t as i64).collect()).unwrap();
        let names: Vec<String> = (1..=k).map(|j| format!("x{j}")).collect();
        let cols: Vec<Vec<f64>> = names
            .iter()
            .map(|_| (0..n * t).map(|_| normal(rng)).collect())
            .collect();
        let betas: Vec<f64> = names.iter().map(|_| 0.5 * normal(rng)).collect();
        let alphas: Vec<f64> = (0..n).map(|_| 1.0 + 0.5 * normal(rng)).collect();
        let y: Vec<f64> = (0..n * t)
            .map(|i| {
                let eta = alphas[i / t] + cols.iter().zip(&betas).map(|(c, b)| c[i] * b).sum::<f64>();
                Poisson::new(eta.exp()).unwrap().sample(rng)
            })
            .collect();
        let ok = y.chunks(t).all(|c| c.iter().sum::<f64>() > 0.0);
        if !ok {
            continue;
        }
        for (name, col) in names.iter().zip(cols) {
            p.add_column(name, col).unwrap();
        }
        p.add_column("y", y).unwrap();
        return (p, names);
    }
}

pub fn entity_index(p: &Panel) -> Vec<usize> {
    (0..p.n_cells()).map(|i| i / p.n_times()).collect()
}

pub fn columns(p: &Panel, names: &[String]) -> Vec<Vec<f64>> {
    names.iter().map(|n| p.values(n).unwrap()).collect()
}
