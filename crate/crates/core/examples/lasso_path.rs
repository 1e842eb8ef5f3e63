//! Fit a weighted-lasso logistic path on a toy design and check KKT at each point.

use claimrisk::featurize::SparseDesignMatrix;
use claimrisk::solver::{fit_path, kkt_residual, lambda_grid, lambda_max, FitOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> claimrisk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, p) = (400, 12);
    let truth = [1.2, -0.8, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4];
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..p).map(|_| rng.random_bool(0.25) as u8).collect())
        .collect();
    let y: Vec<u8> = rows
        .iter()
        .map(|r| {
            let eta = -1.0 + r.iter().zip(&truth).map(|(&x, b)| x as f64 * b).sum::<f64>();
            rng.random_bool(1.0 / (1.0 + (-eta).exp())) as u8
        })
        .collect();
    let design = SparseDesignMatrix::from_dense_binary(&rows)?;

    // Column 0 is left unpenalized; the rest carry increasing penalties.
    let pf: Vec<f64> = (0..p)
        .map(|j| if j == 0 { 0.0 } else { 1.0 + (j % 3) as f64 })
        .collect();
    let lmax = lambda_max(&design, &y, &pf)?;
    let lambdas = lambda_grid(lmax, 8, 1e-2);
    let path = fit_path(&design, &y, &pf, &lambdas, &FitOptions::default())?;

    println!("lambda_max = {lmax:.5}");
    println!("{:>10} {:>4} {:>10} {:>9}", "lambda", "nnz", "objective", "kkt");
    for fit in &path.fits {
        println!(
            "{:>10.5} {:>4} {:>10.5} {:>9.1e}",
            fit.lambda,
            fit.n_nonzero,
            fit.objective,
            kkt_residual(&design, &y, &pf, fit)
        );
    }
    let last = path.fits.last().unwrap();
    println!("coefficients at the smallest lambda:");
    for (j, b) in &last.coefficients {
        println!("  x{j:<2} {b:+.3}  (true {:+.1})", truth[*j]);
    }
    Ok(())
}
