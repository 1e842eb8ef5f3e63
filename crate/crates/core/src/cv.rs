//! Stratified K-fold cross-validation over a lambda path.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::SparseDesignMatrix;
use crate::metrics::auc;
use crate::solver::{fit_path, predict_logit, FitOptions, LambdaPath, LassoFit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    /// Rows of fold `f`, ascending.
    pub fn rows(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    /// Rows outside fold `f`, ascending.
    pub fn train_rows(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != f).collect()
    }
}

/// Shuffles positives and negatives separately and deals them round-robin.
pub fn make_folds(y: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k = {k}; need at least 2 folds")));
    }
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 0).collect();
    if pos.len() + neg.len() != y.len() {
        return Err(Error::InvalidInput("outcomes must be 0/1".into()));
    }
    if pos.len() < k || neg.len() < k {
        return Err(Error::TooFew(format!(
            "{} positives and {} negatives for {k} folds",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold_of = vec![0; y.len()];
    for (i, &row) in pos.iter().enumerate() {
        fold_of[row] = i % k;
    }
    // Continue the deal where positives stopped so fold sizes stay balanced.
    let offset = pos.len() % k;
    for (i, &row) in neg.iter().enumerate() {
        fold_of[row] = (i + offset) % k;
    }
    Ok(FoldAssignment { k, fold_of, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    /// `per_fold_auc[fold][lambda]`.
    pub per_fold_auc: Vec<Vec<f64>>,
    pub mean_auc: Vec<f64>,
    pub selected_index: usize,
    pub selected_lambda: f64,
    pub fold_fits: Vec<LambdaPath>,
    /// Held-out logits, `fold_scores[fold][lambda][i]` for the i-th row of the fold.
    pub fold_scores: Vec<Vec<Vec<f64>>>,
    pub oof_logit: Vec<f64>,
    pub folds: FoldAssignment,
}

impl CvResult {
    /// Out-of-fold logits at grid position `index`.
    pub fn oof_at(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.folds.fold_of.len()];
        for f in 0..self.folds.k {
            for (row, &s) in self.folds.rows(f).into_iter().zip(&self.fold_scores[f][index]) {
                out[row] = s;
            }
        }
        out
    }

    /// The fold-`f` model at the selected lambda.
    pub fn fold_model(&self, f: usize) -> &LassoFit {
        &self.fold_fits[f].fits[self.selected_index]
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lambda", "fold", "auc"])?;
        for (j, lambda) in self.lambdas.iter().enumerate() {
            for f in 0..self.folds.k {
                w.write_record([lambda.to_string(), f.to_string(), self.per_fold_auc[f][j].to_string()])?;
            }
            w.write_record([lambda.to_string(), "mean".into(), self.mean_auc[j].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Index of the largest mean AUC; the earliest (largest lambda) wins ties.
pub fn select_index(mean_auc: &[f64]) -> usize {
    let mut best = 0;
    for (j, &a) in mean_auc.iter().enumerate() {
        if a > mean_auc[best] {
            best = j;
        }
    }
    best
}

/// Fits a lambda path on each fold's complement and selects lambda by mean held-out AUC.
pub fn cv_select_lambda(
    design: &SparseDesignMatrix,
    y: &[u8],
    penalty_factors: &[f64],
    lambdas: &[f64],
    folds: &FoldAssignment,
    options: &FitOptions,
) -> Result<CvResult> {
    if y.len() != design.n_rows() || folds.fold_of.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} rows, {} outcomes, {} fold labels",
            design.n_rows(),
            y.len(),
            folds.fold_of.len()
        )));
    }
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    let per_fold: Vec<Result<(LambdaPath, Vec<Vec<f64>>, Vec<f64>)>> = (0..folds.k)
        .into_par_iter()
        .map(|f| {
            let wrap = |e: Error| Error::FoldFit {
                fold: f,
                source: Box::new(e),
            };
            let train = folds.train_rows(f);
            let test = folds.rows(f);
            let xtr = design.select_rows(&train);
            let ytr: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let xte = design.select_rows(&test);
            let yte: Vec<u8> = test.iter().map(|&i| y[i]).collect();
            let path = fit_path(&xtr, &ytr, penalty_factors, lambdas, options).map_err(wrap)?;
            let mut scores = Vec::with_capacity(lambdas.len());
            let mut aucs = Vec::with_capacity(lambdas.len());
            for fit in &path.fits {
                let s = predict_logit(fit, &xte).map_err(wrap)?;
                aucs.push(auc(&s, &yte).map_err(wrap)?);
                scores.push(s);
            }
            log::debug!("fold {f}: path of {} fits done", path.fits.len());
            Ok((path, scores, aucs))
        })
        .collect();
    let mut fold_fits = Vec::with_capacity(folds.k);
    let mut fold_scores = Vec::with_capacity(folds.k);
    let mut per_fold_auc = Vec::with_capacity(folds.k);
    for r in per_fold {
        let (path, scores, aucs) = r?;
        fold_fits.push(path);
        fold_scores.push(scores);
        per_fold_auc.push(aucs);
    }
    let mean_auc: Vec<f64> = (0..lambdas.len())
        .map(|j| per_fold_auc.iter().map(|a| a[j]).sum::<f64>() / folds.k as f64)
        .collect();
    let selected_index = select_index(&mean_auc);
    let mut result = CvResult {
        lambdas: lambdas.to_vec(),
        per_fold_auc,
        mean_auc,
        selected_index,
        selected_lambda: lambdas[selected_index],
        fold_fits,
        fold_scores,
        oof_logit: Vec::new(),
        folds: folds.clone(),
    };
    result.oof_logit = result.oof_at(selected_index);
    Ok(result)
}

/// Rescores every row with the fold model that excluded it, at the selected lambda.
pub fn cross_fitted_predictions(cv: &CvResult, design: &SparseDesignMatrix) -> Result<Vec<f64>> {
    if design.n_rows() != cv.folds.fold_of.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, folds cover {}",
            design.n_rows(),
            cv.folds.fold_of.len()
        )));
    }
    let mut out = vec![0.0; design.n_rows()];
    for f in 0..cv.folds.k {
        let rows = cv.folds.rows(f);
        let scores = predict_logit(cv.fold_model(f), &design.select_rows(&rows))?;
        for (row, s) in rows.into_iter().zip(scores) {
            out[row] = s;
        }
    }
    Ok(out)
}

/// Full-data fit at the selected lambda, warm-started along the grid prefix.
pub fn refit_full(
    design: &SparseDesignMatrix,
    y: &[u8],
    penalty_factors: &[f64],
    cv: &CvResult,
    options: &FitOptions,
) -> Result<LassoFit> {
    let path = fit_path(design, y, penalty_factors, &cv.lambdas[..=cv.selected_index], options)?;
    Ok(path.fits.into_iter().next_back().expect("non-empty grid prefix"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_round_robin() {
        let y = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let f = make_folds(&y, 5, 3).unwrap();
        for k in 0..5 {
            let rows = f.rows(k);
            assert_eq!(rows.len(), 2);
            assert_eq!(rows.iter().filter(|&&i| y[i] == 1).count(), 1);
        }
        assert_eq!(f, make_folds(&y, 5, 3).unwrap());
    }

    #[test]
    fn uneven_positive_counts() {
        let mut y = vec![0u8; 10_003];
        y.iter_mut().take(401).for_each(|v| *v = 1);
        let f = make_folds(&y, 5, 9).unwrap();
        let mut pos = [0usize; 5];
        let mut all = [0usize; 5];
        for (i, &k) in f.fold_of.iter().enumerate() {
            pos[k] += y[i] as usize;
            all[k] += 1;
        }
        assert!(pos.iter().all(|&c| c == 80 || c == 81), "{pos:?}");
        assert!(all.iter().max().unwrap() - all.iter().min().unwrap() <= 1);
    }

    #[test]
    fn too_few_positives() {
        assert!(matches!(make_folds(&[1, 0, 0, 0, 0, 0], 2, 1), Err(Error::TooFew(_))));
        assert!(make_folds(&[1, 0], 1, 1).is_err());
    }

    #[test]
    fn ties_go_to_larger_lambda() {
        assert_eq!(select_index(&[0.7, 0.8, 0.8, 0.6]), 1);
        assert_eq!(select_index(&[0.5]), 0);
    }
}
