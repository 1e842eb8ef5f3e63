#![allow(dead_code)]

use claimrisk::featurize::{DesignColumn, SparseDesignMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

fn prob(e: f64) -> f64 {
    1.0 / (1.0 + (-e).exp())
}

/// Penalized logistic objective on a dense matrix, written independently of the library.
pub fn dense_objective(x: &[Vec<f64>], y: &[u8], pf: &[f64], lambda: f64, b0: f64, b: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mut loss = 0.0;
    for (row, &yi) in x.iter().zip(y) {
        let eta = b0 + row.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
        loss += softplus(eta) - yi as f64 * eta;
    }
    loss / n + b.iter().zip(pf).map(|(c, v)| lambda * v * c.abs()).sum::<f64>()
}

fn smooth_grad(x: &[Vec<f64>], y: &[u8], b0: f64, b: &[f64]) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut g0 = 0.0;
    let mut g = vec![0.0; b.len()];
    let mut loss = 0.0;
    for (row, &yi) in x.iter().zip(y) {
        let eta = b0 + row.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
        loss += softplus(eta) - yi as f64 * eta;
        let r = prob(eta) - yi as f64;
        g0 += r;
        for (gj, a) in g.iter_mut().zip(row) {
            *gj += r * a;
        }
    }
    g.iter_mut().for_each(|v| *v /= n);
    (g0 / n, g, loss / n)
}

fn smooth_loss(x: &[Vec<f64>], y: &[u8], b0: f64, b: &[f64]) -> f64 {
    dense_objective(x, y, &vec![0.0; b.len()], 0.0, b0, b)
}

/// FISTA with backtracking and gradient-based adaptive restart.
/// Returns `(objective, intercept, coefficients)`.
pub fn fista_oracle(x: &[Vec<f64>], y: &[u8], pf: &[f64], lambda: f64, tol: f64) -> (f64, f64, Vec<f64>) {
    let p = pf.len();
    let ybar = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
    let mut b0 = (ybar / (1.0 - ybar)).ln();
    let mut b = vec![0.0; p];
    let (mut z0, mut z) = (b0, b.clone());
    let mut t = 1.0f64;
    let mut step = 1.0f64;
    for _ in 0..2_000_000 {
        let (g0, g, fz) = smooth_grad(x, y, z0, &z);
        // Backtracking on the smooth part.
        let (nb0, nb) = loop {
            let c0 = z0 - step * g0;
            let c: Vec<f64> = (0..p)
                .map(|j| {
                    let u = z[j] - step * g[j];
                    let th = step * lambda * pf[j];
                    u.signum() * (u.abs() - th).max(0.0)
                })
                .collect();
            let d0 = c0 - z0;
            let d: Vec<f64> = c.iter().zip(&z).map(|(a, b)| a - b).collect();
            let lin = g0 * d0 + g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
            let sq = d0 * d0 + d.iter().map(|v| v * v).sum::<f64>();
            if smooth_loss(x, y, c0, &c) <= fz + lin + sq / (2.0 * step) + 1e-15 {
                break (c0, c);
            }
            step *= 0.5;
        };
        let move_sq = (nb0 - b0).powi(2) + nb.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
        // Generalized gradient norm at z.
        let gmap = ((nb0 - z0).powi(2) + nb.iter().zip(&z).map(|(a, c)| (a - c).powi(2)).sum::<f64>()).sqrt() / step;
        // Restart when momentum points uphill.
        let uphill = (z0 - nb0) * (nb0 - b0)
            + z.iter()
                .zip(&nb)
                .zip(&b)
                .map(|((zz, n), o)| (zz - n) * (n - o))
                .sum::<f64>();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        z0 = nb0 + mom * (nb0 - b0);
        z = nb.iter().zip(&b).map(|(n, o)| n + mom * (n - o)).collect();
        t = if uphill > 0.0 { 1.0 } else { t_next };
        b0 = nb0;
        b = nb;
        step *= 1.1;
        if gmap < tol && move_sq.sqrt() < tol {
            break;
        }
    }
    (dense_objective(x, y, pf, lambda, b0, &b), b0, b)
}

/// Random dense binary matrix with an optional trailing continuous column.
pub fn random_instance(r: &mut ChaCha8Rng, n: usize, p: usize, with_dense: bool) -> (Vec<Vec<f64>>, Vec<u8>) {
    let density = r.random_range(0.15..0.5);
    let truth: Vec<f64> = (0..p).map(|_| r.random_range(-1.5..1.5)).collect();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..p)
            .map(|_| if r.random::<f64>() < density { 1.0 } else { 0.0 })
            .collect();
        if with_dense {
            *row.last_mut().unwrap() = r.random_range(0.0..2.0);
        }
        let eta = -0.5 + row.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>();
        y.push((r.random::<f64>() < prob(eta)) as u8);
        x.push(row);
    }
    (x, y)
}

/// Sparse design from a dense matrix; the last column is dense when `with_dense`.
pub fn to_design(x: &[Vec<f64>], with_dense: bool) -> SparseDesignMatrix {
    let n = x.len();
    let p = x[0].len();
    let columns = (0..p)
        .map(|j| {
            if with_dense && j == p - 1 {
                DesignColumn::Dense(x.iter().map(|r| r[j]).collect())
            } else {
                DesignColumn::Binary((0..n).filter(|&i| x[i][j] != 0.0).map(|i| i as u32).collect())
            }
        })
        .collect();
    SparseDesignMatrix::new(n, columns).unwrap()
}

/// Brute-force pair-counting AUC.
pub fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}
