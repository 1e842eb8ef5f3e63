//! Discrimination and fit metrics for binary predictions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::sigmoid;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

const ADJUST_BRACKET: f64 = 40.0;
const ADJUST_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WoeUnit {
    #[default]
    Nats,
    Bits,
}

impl std::str::FromStr for WoeUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nats" => Ok(WoeUnit::Nats),
            "bits" => Ok(WoeUnit::Bits),
            _ => Err(Error::InvalidInput(format!("unknown unit {s:?} (nats|bits)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub auc: f64,
    pub lambda_woe: f64,
    pub woe_unit: WoeUnit,
    pub log_lik: f64,
    pub n: usize,
    pub n_pos: usize,
    pub prior: f64,
    pub clamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_pair(a: usize, labels: &[u8]) -> Result<()> {
    if a != labels.len() {
        return Err(Error::Dimension(format!("{a} scores for {} labels", labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty input".into()));
    }
    if let Some(v) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidInput(format!("label {v} is not 0/1")));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&v| v == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateOutcome {
            n: labels.len(),
            value: if pos == 0 { 0 } else { 1 },
        });
    }
    Ok((pos, neg))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

/// Mann-Whitney AUC via rank sums with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores.len(), labels)?;
    check_scores(scores)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * pos_in_group as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// ROC points from the strictest threshold down, starting at `(0, 0)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    check_pair(scores.len(), labels)?;
    check_scores(scores)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoid area under a ROC curve.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
fn logit_clamped(p: f64) -> f64 {
    let p = clamp_prob(p);
    p.ln() - (-p).ln_1p()
}

/// Mean of `(2y - 1) * (logit(p_i) - logit(prior))`.
pub fn expected_weight_of_evidence(probs: &[f64], labels: &[u8], prior: f64, unit: WoeUnit) -> Result<f64> {
    check_pair(probs.len(), labels)?;
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidInput(format!("prior {prior} must lie in (0, 1)")));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidInput("NaN probability".into()));
    }
    let base = logit_clamped(prior);
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            sign * (logit_clamped(p) - base)
        })
        .sum();
    let nats = total / probs.len() as f64;
    Ok(match unit {
        WoeUnit::Nats => nats,
        WoeUnit::Bits => nats / std::f64::consts::LN_2,
    })
}

/// Binomial log-likelihood `sum y ln p + (1 - y) ln(1 - p)`.
pub fn log_likelihood(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(probs.len(), labels)?;
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidInput("NaN probability".into()));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                p.ln()
            } else {
                (-p).ln_1p()
            }
        })
        .sum())
}

fn mean_prob(logits: &[f64], delta: f64) -> f64 {
    logits.iter().map(|&l| sigmoid(l + delta)).sum::<f64>() / logits.len() as f64
}

/// Shifts all logits by one constant so the mean probability equals `target`.
pub fn prevalence_adjust(logits: &[f64], target: f64) -> Result<(Vec<f64>, f64)> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty input".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!("target {target} must lie in (0, 1)")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let delta = if (mean_prob(logits, 0.0) - target).abs() <= ADJUST_TOL {
        0.0
    } else {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = logits.iter().copied().fold(f64::INFINITY, f64::min);
        // Every shifted logit lies at or beyond -/+ ADJUST_BRACKET at the ends.
        let (mut lo, mut hi) = (-ADJUST_BRACKET - max, ADJUST_BRACKET - min);
        if mean_prob(logits, lo) > target || mean_prob(logits, hi) < target {
            return Err(Error::InvalidInput(format!(
                "target mean {target} unreachable with a shift in [{lo}, {hi}]"
            )));
        }
        let mut mid = 0.0;
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let m = mean_prob(logits, mid);
            if (m - target).abs() <= ADJUST_TOL {
                break;
            }
            if m < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
                break;
            }
        }
        mid
    };
    Ok((logits.iter().map(|l| l + delta).collect(), delta))
}

impl EvaluationReport {
    /// Metrics of `logits` against `labels`; `prior` defaults to the label mean.
    pub fn from_logits(logits: &[f64], labels: &[u8], prior: Option<f64>, unit: WoeUnit) -> Result<Self> {
        check_pair(logits.len(), labels)?;
        let n_pos = labels.iter().filter(|&&v| v == 1).count();
        let prior = prior.unwrap_or(n_pos as f64 / labels.len() as f64);
        let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(EvaluationReport {
            auc: auc(logits, labels)?,
            lambda_woe: expected_weight_of_evidence(&probs, labels, prior, unit)?,
            woe_unit: unit,
            log_lik: log_likelihood(&probs, labels)?,
            n: labels.len(),
            n_pos,
            prior,
            clamp: PROB_CLAMP,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
