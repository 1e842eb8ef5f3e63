//! Cross-fitted risk indices with coefficient cancellation, and age
//! profiles from spline logistic models with and without the index.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Outcome};
use crate::cv::{CvResult, FoldAssignment};
use crate::error::{Error, Result};
use crate::featurize::{FeatureSpace, SparseDesignMatrix};
use crate::solver::{log1pexp, predict_logit, sigmoid, LassoFit};

pub const DEFAULT_KNOT_QUANTILES: [f64; 5] = [0.05, 0.275, 0.5, 0.725, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskIndex {
    pub scores: Vec<f64>,
    pub fold_of: Vec<usize>,
    pub cancelled: Vec<String>,
    pub lambda: f64,
}

impl RiskIndex {
    pub fn write_csv<'a>(&self, ids: impl IntoIterator<Item = &'a str>, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "fold", "score_logit"])?;
        let mut n = 0;
        for (i, id) in ids.into_iter().enumerate() {
            let (Some(f), Some(s)) = (self.fold_of.get(i), self.scores.get(i)) else {
                return Err(Error::Dimension(format!(
                    "more ids than {} index rows",
                    self.scores.len()
                )));
            };
            w.write_record([id.to_string(), f.to_string(), s.to_string()])?;
            n += 1;
        }
        if n != self.scores.len() {
            return Err(Error::Dimension(format!(
                "{n} ids for {} index rows",
                self.scores.len()
            )));
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn cancel_positions(space: &FeatureSpace, cancel: &[String]) -> Result<Vec<usize>> {
    cancel
        .iter()
        .map(|name| {
            space
                .position(name)
                .ok_or_else(|| Error::InvalidInput(format!("cancelled column {name:?} is not in the feature space")))
        })
        .collect()
}

/// Scores each row with its fold model after zeroing the cancelled columns.
pub fn build_risk_index(
    cv: &CvResult,
    design: &SparseDesignMatrix,
    space: &FeatureSpace,
    cancel: &[String],
) -> Result<RiskIndex> {
    let models: Vec<LassoFit> = (0..cv.folds.k).map(|f| cv.fold_model(f).clone()).collect();
    risk_index_from_models(&models, &cv.folds, design, space, cancel)
}

/// [`build_risk_index`] from persisted fold models.
pub fn risk_index_from_models(
    models: &[LassoFit],
    folds: &FoldAssignment,
    design: &SparseDesignMatrix,
    space: &FeatureSpace,
    cancel: &[String],
) -> Result<RiskIndex> {
    check_models(models, folds, design, space)?;
    let zeroed = cancel_positions(space, cancel)?;
    let scores = score_by_fold(models, folds, design, |m| m.with_zeroed(&zeroed))?;
    Ok(RiskIndex {
        scores,
        fold_of: folds.fold_of.clone(),
        cancelled: cancel.to_vec(),
        lambda: models.first().map_or(0.0, |m| m.lambda),
    })
}

fn check_models(
    models: &[LassoFit],
    folds: &FoldAssignment,
    design: &SparseDesignMatrix,
    space: &FeatureSpace,
) -> Result<()> {
    if models.len() != folds.k || design.n_rows() != folds.fold_of.len() || design.n_cols() != space.len() {
        return Err(Error::Dimension(format!(
            "{} fold models for k = {}, design {}x{}, folds cover {} rows, space has {} columns",
            models.len(),
            folds.k,
            design.n_rows(),
            design.n_cols(),
            folds.fold_of.len(),
            space.len()
        )));
    }
    Ok(())
}

fn score_by_fold(
    models: &[LassoFit],
    folds: &FoldAssignment,
    design: &SparseDesignMatrix,
    adjust: impl Fn(&LassoFit) -> LassoFit + Sync,
) -> Result<Vec<f64>> {
    let rows: Vec<Vec<usize>> = (0..folds.k).map(|f| folds.rows(f)).collect();
    let per_fold: Vec<Result<Vec<f64>>> = rows
        .par_iter()
        .zip(models)
        .map(|(r, m)| predict_logit(&adjust(m), &design.select_rows(r)))
        .collect();
    let mut scores = vec![0.0; design.n_rows()];
    for (r, s) in rows.iter().zip(per_fold) {
        for (&row, v) in r.iter().zip(s?) {
            scores[row] = v;
        }
    }
    Ok(scores)
}

/// Per-row contribution `x_r . b_fold(r)` restricted to `columns`, intercept excluded.
pub fn cancellation_contribution(
    models: &[LassoFit],
    folds: &FoldAssignment,
    design: &SparseDesignMatrix,
    space: &FeatureSpace,
    columns: &[String],
) -> Result<Vec<f64>> {
    check_models(models, folds, design, space)?;
    let pos = cancel_positions(space, columns)?;
    score_by_fold(models, folds, design, |m| {
        let mut kept = m.clone();
        kept.intercept = 0.0;
        kept.coefficients.retain(|(j, _)| pos.contains(j));
        kept
    })
}

/// Column names of every dummy of the named categorical features.
pub fn feature_dummies(space: &FeatureSpace, features: &[&str]) -> Vec<String> {
    features
        .iter()
        .flat_map(|f| space.feature_columns(f))
        .map(|j| space.column(j).name.clone())
        .collect()
}

/// Numeric age of an age-group label: `"40-44"` gives 42.5, `"90+"` gives 92.5.
pub fn age_midpoint(label: &str) -> Result<f64> {
    let bad = || Error::InvalidInput(format!("cannot read an age from {label:?}"));
    let t = label.trim();
    if let Some(lo) = t.strip_suffix('+') {
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        return Ok(lo + 2.5);
    }
    if let Some((lo, hi)) = t.split_once('-') {
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo + hi + 1.0) / 2.0);
    }
    t.parse().map_err(|_| bad())
}

/// Linear-interpolation sample quantile.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Distinct age quantiles at [`DEFAULT_KNOT_QUANTILES`].
pub fn default_knots(ages: &[f64]) -> Result<Vec<f64>> {
    if ages.is_empty() {
        return Err(Error::TooFew("no ages for knot placement".into()));
    }
    let mut sorted = ages.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut knots: Vec<f64> = DEFAULT_KNOT_QUANTILES.iter().map(|&q| quantile(&sorted, q)).collect();
    knots.dedup();
    if knots.len() < 4 {
        return Err(Error::TooFew(format!("only {} distinct knot positions", knots.len())));
    }
    Ok(knots)
}

fn check_knots(knots: &[f64]) -> Result<()> {
    if knots.len() < 4 {
        return Err(Error::TooFew(format!("{} knots; need at least 4", knots.len())));
    }
    if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "knots must be finite and strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Natural cubic spline basis without the constant: `K - 1` columns for `K` knots.
///
/// Uses the truncated-power form: `N_1 = x`, `N_{k+2} = d_k - d_{K-1}` with
/// `d_k = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k)`, evaluated on ages
/// rescaled to `[0, 1]` over the boundary knots.
pub fn natural_cubic_basis(ages: &[f64], knots: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_knots(knots)?;
    let k = knots.len();
    let (a, b) = (knots[0], knots[k - 1]);
    let scale = |x: f64| (x - a) / (b - a);
    let t: Vec<f64> = knots.iter().map(|&x| scale(x)).collect();
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |j: usize, x: f64| (cube(x - t[j]) - cube(x - t[k - 1])) / (t[k - 1] - t[j]);
    Ok(ages
        .iter()
        .map(|&age| {
            let x = scale(age);
            let mut row = Vec::with_capacity(k - 1);
            row.push(x);
            let last = d(k - 2, x);
            for j in 0..k - 2 {
                row.push(d(j, x) - last);
            }
            row
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub log_lik: f64,
}

/// Unpenalized logistic regression by Newton steps with step halving.
/// `x` rows must already contain an intercept column if one is wanted.
pub fn fit_logistic_newton(x: &[Vec<f64>], y: &[u8]) -> Result<LogisticFit> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::Dimension(format!("{n} rows, {} outcomes", y.len())));
    }
    let m = x[0].len();
    let loglik = |b: &DVector<f64>| -> f64 {
        x.iter()
            .zip(y)
            .map(|(row, &yi)| {
                let eta: f64 = row.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                yi as f64 * eta - log1pexp(eta)
            })
            .sum()
    };
    let mut beta = DVector::<f64>::zeros(m);
    let mut ll = loglik(&beta);
    for it in 0..200 {
        let mut grad = DVector::<f64>::zeros(m);
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for (row, &yi) in x.iter().zip(y) {
            let eta: f64 = row.iter().zip(beta.iter()).map(|(a, c)| a * c).sum();
            let p = sigmoid(eta);
            let w = p * (1.0 - p);
            for a in 0..m {
                grad[a] += (yi as f64 - p) * row[a];
                for c in a..m {
                    hess[(a, c)] += w * row[a] * row[c];
                }
            }
        }
        for a in 0..m {
            for c in 0..a {
                hess[(a, c)] = hess[(c, a)];
            }
        }
        if grad.amax() < 1e-9 * n as f64 {
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                iterations: it,
                log_lik: ll,
            });
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .or_else(|| hess.clone().lu().solve(&grad))
            .ok_or_else(|| Error::Separation("singular information matrix in spline fit".into()))?;
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cl = loglik(&cand);
            if cl >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cl;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::Convergence("step halving failed in spline fit".into()));
            }
        }
        if beta.amax() > 1e4 {
            return Err(Error::Separation("coefficients diverge in spline fit".into()));
        }
    }
    Err(Error::Convergence(
        "spline fit did not converge in 200 Newton steps".into(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineProfile {
    pub gender: String,
    pub knots: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub index_coef: f64,
    pub intercept: f64,
    pub extra_coefs: Vec<f64>,
    /// Contribution of the index and extra covariates held at their means.
    pub offset_at_means: f64,
}

impl SplineProfile {
    /// Fitted logit at `age`, with index and covariates at their means.
    pub fn evaluate(&self, age: f64) -> f64 {
        let basis = natural_cubic_basis(&[age], &self.knots).expect("knots validated at fit time");
        self.intercept + self.offset_at_means + basis[0].iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Profile difference between the oldest and youngest age.
    pub fn rise(&self, lo: f64, hi: f64) -> f64 {
        self.evaluate(hi) - self.evaluate(lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePair {
    pub gender: String,
    pub conditional: SplineProfile,
    pub unconditional: SplineProfile,
    pub age_range: (f64, f64),
}

/// Inputs for one profile analysis, one entry per person.
#[derive(Debug, Clone, Default)]
pub struct ProfileData {
    pub ages: Vec<f64>,
    pub genders: Vec<String>,
    pub y: Vec<u8>,
    pub index: Vec<f64>,
    /// Optional extra covariates, one vector per person.
    pub extra: Vec<Vec<f64>>,
}

impl ProfileData {
    /// Reads ages from an age-group categorical and genders from a gender categorical.
    pub fn from_cohort(
        cohort: &Cohort,
        index: &RiskIndex,
        age_feature: &str,
        gender_feature: &str,
        outcome: Outcome,
    ) -> Result<Self> {
        if index.scores.len() != cohort.len() {
            return Err(Error::Dimension(format!(
                "index has {} rows, cohort {}",
                index.scores.len(),
                cohort.len()
            )));
        }
        let mut data = ProfileData {
            index: index.scores.clone(),
            y: cohort.labels(outcome),
            ..ProfileData::default()
        };
        for r in cohort.records() {
            let get = |f: &str| {
                r.categorical
                    .get(f)
                    .ok_or_else(|| Error::Cohort(format!("person {} has no {f:?} value", r.id)))
            };
            data.ages.push(age_midpoint(get(age_feature)?)?);
            data.genders.push(get(gender_feature)?.clone());
        }
        Ok(data)
    }

    /// Appends 0/1 dummies for every non-reference level of `feature`.
    pub fn add_dummies(&mut self, cohort: &Cohort, feature: &str, reference: &str) -> Result<()> {
        let levels: Vec<String> = cohort
            .dictionary()
            .get(feature)
            .ok_or_else(|| Error::Config(format!("unknown categorical {feature:?}")))?
            .iter()
            .filter(|l| *l != reference)
            .cloned()
            .collect();
        if self.extra.is_empty() {
            self.extra = vec![Vec::new(); cohort.len()];
        }
        for (row, r) in self.extra.iter_mut().zip(cohort.records()) {
            let v = r.categorical.get(feature);
            row.extend(levels.iter().map(|l| (v == Some(l)) as u8 as f64));
        }
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn fit_one(data: &ProfileData, rows: &[usize], gender: &str, knots: &[f64], with_index: bool) -> Result<SplineProfile> {
    let ages: Vec<f64> = rows.iter().map(|&i| data.ages[i]).collect();
    let basis = natural_cubic_basis(&ages, knots)?;
    let n_extra = data.extra.first().map_or(0, Vec::len);
    let x: Vec<Vec<f64>> = rows
        .iter()
        .zip(basis)
        .map(|(&i, b)| {
            let mut row = vec![1.0];
            row.extend(b);
            if with_index {
                row.push(data.index[i]);
            }
            if n_extra > 0 {
                row.extend(&data.extra[i]);
            }
            row
        })
        .collect();
    // Columns constant within this gender carry no information.
    let keep: Vec<usize> = (0..x[0].len())
        .filter(|&c| c == 0 || x.iter().any(|r| r[c] != x[0][c]))
        .collect();
    let reduced: Vec<Vec<f64>> = x.iter().map(|r| keep.iter().map(|&c| r[c]).collect()).collect();
    let y: Vec<u8> = rows.iter().map(|&i| data.y[i]).collect();
    let fit = fit_logistic_newton(&reduced, &y)?;
    let mut full = vec![0.0; x[0].len()];
    for (&c, b) in keep.iter().zip(&fit.coefficients) {
        full[c] = *b;
    }
    let nb = knots.len() - 1;
    let index_coef = if with_index { full[1 + nb] } else { 0.0 };
    let extra_coefs = full[1 + nb + with_index as usize..].to_vec();
    let mut offset = 0.0;
    if with_index {
        offset += index_coef * mean(rows.iter().map(|&i| data.index[i]));
    }
    for (c, b) in extra_coefs.iter().enumerate() {
        offset += b * mean(rows.iter().map(|&i| data.extra[i][c]));
    }
    Ok(SplineProfile {
        gender: gender.to_string(),
        knots: knots.to_vec(),
        coefficients: full[1..=nb].to_vec(),
        index_coef,
        intercept: full[0],
        extra_coefs,
        offset_at_means: offset,
    })
}

/// Per-gender spline profiles with the index (conditional) and without it.
/// `knots = None` places knots at age quantiles within each gender.
pub fn fit_conditional_profile(data: &ProfileData, knots: Option<&[f64]>) -> Result<Vec<ProfilePair>> {
    let n = data.ages.len();
    if data.genders.len() != n
        || data.y.len() != n
        || data.index.len() != n
        || (!data.extra.is_empty() && data.extra.len() != n)
    {
        return Err(Error::Dimension("profile inputs differ in length".into()));
    }
    let mut by_gender: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in data.genders.iter().enumerate() {
        by_gender.entry(g.as_str()).or_default().push(i);
    }
    by_gender
        .into_par_iter()
        .map(|(gender, rows)| {
            let ages: Vec<f64> = rows.iter().map(|&i| data.ages[i]).collect();
            let knots = match knots {
                Some(k) => k.to_vec(),
                None => default_knots(&ages)?,
            };
            let lo = ages.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(ProfilePair {
                gender: gender.to_string(),
                conditional: fit_one(data, &rows, gender, &knots, true)?,
                unconditional: fit_one(data, &rows, gender, &knots, false)?,
                age_range: (lo, hi),
            })
        })
        .collect()
}

pub fn write_profile_csv(pairs: &[ProfilePair], grid_step: f64, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gender", "age", "logit_conditional", "logit_unconditional"])?;
    for p in pairs {
        let (lo, hi) = p.age_range;
        let steps = ((hi - lo) / grid_step).floor() as usize;
        for s in 0..=steps {
            let age = lo + s as f64 * grid_step;
            w.write_record([
                p.gender.clone(),
                age.to_string(),
                p.conditional.evaluate(age).to_string(),
                p.unconditional.evaluate(age).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub group: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// `bins` equal-width edges spanning `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Score counts per group over half-open bins `[lo, hi)`; the last bin is closed.
/// Scores outside the edges are not counted.
pub fn score_distribution(scores: &[f64], groups: &[String], edges: &[f64]) -> Result<Vec<HistogramRow>> {
    if scores.len() != groups.len() {
        return Err(Error::Dimension(format!(
            "{} scores, {} group labels",
            scores.len(),
            groups.len()
        )));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "bin edges must be ascending with at least two entries".into(),
        ));
    }
    let nb = edges.len() - 1;
    let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (s, g) in scores.iter().zip(groups) {
        let c = counts.entry(g.as_str()).or_insert_with(|| vec![0; nb]);
        if *s < edges[0] || *s > edges[nb] || s.is_nan() {
            continue;
        }
        let bin = edges.partition_point(|e| e <= s).saturating_sub(1).min(nb - 1);
        c[bin] += 1;
    }
    Ok(counts
        .into_iter()
        .flat_map(|(g, c)| {
            c.into_iter().enumerate().map(move |(b, count)| HistogramRow {
                group: g.to_string(),
                bin_lo: edges[b],
                bin_hi: edges[b + 1],
                count,
            })
        })
        .collect())
}

pub fn write_histogram_csv(rows: &[HistogramRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "group,bin_lo,bin_hi,count").map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
