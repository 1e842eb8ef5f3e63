//! End-to-end workflows built from the module operations: cross-validated
//! fitting, frozen-model evaluation on new cohorts, and config benchmarks.

use std::collections::{HashMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Outcome};
use crate::cv::{cv_select_lambda, make_folds, refit_full, CvResult, FoldAssignment};
use crate::error::{Error, Result};
use crate::featurize::{
    build_design, build_design_for_space, AlignReport, FeatureConfig, FeatureSpace, SparseDesignMatrix,
};
use crate::metrics::{prevalence_adjust, EvaluationReport, WoeUnit};
use crate::solver::{
    fit_path, lambda_grid, lambda_max, predict_logit, FitOptions, LassoFit, DEFAULT_GRID_SIZE, DEFAULT_MIN_RATIO,
};
use crate::taxonomy::Taxonomy;

/// How the shrinkage path is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// `count` log-spaced values from lambda_max down to `min_ratio * lambda_max`.
    Geometric { count: usize, min_ratio: f64 },
    /// Explicit values, fitted in decreasing order.
    Explicit(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Geometric {
            count: DEFAULT_GRID_SIZE,
            min_ratio: DEFAULT_MIN_RATIO,
        }
    }
}

impl FromStr for LambdaGrid {
    type Err = String;

    /// `count[:ratio]` or `list:v1,v2,...`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if let Some(list) = s.strip_prefix("list:") {
            let values = list
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad lambda {v:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err("explicit lambdas must be finite and non-negative".into());
            }
            return Ok(LambdaGrid::Explicit(values));
        }
        let (count, ratio) = match s.split_once(':') {
            Some((c, r)) => (c, Some(r)),
            None => (s, None),
        };
        let count: usize = count
            .trim()
            .parse()
            .map_err(|e| format!("bad grid size {count:?}: {e}"))?;
        let min_ratio = match ratio {
            Some(r) => r
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad grid ratio {r:?}: {e}"))?,
            None => DEFAULT_MIN_RATIO,
        };
        if count == 0 || !(min_ratio > 0.0 && min_ratio < 1.0) {
            return Err("grid needs count >= 1 and 0 < ratio < 1".into());
        }
        Ok(LambdaGrid::Geometric { count, min_ratio })
    }
}

impl LambdaGrid {
    /// Concrete decreasing lambdas for this design and outcome.
    pub fn resolve(&self, design: &SparseDesignMatrix, y: &[u8], penalty_factors: &[f64]) -> Result<Vec<f64>> {
        match self {
            LambdaGrid::Geometric { count, min_ratio } => {
                Ok(lambda_grid(lambda_max(design, y, penalty_factors)?, *count, *min_ratio))
            }
            LambdaGrid::Explicit(v) => {
                let mut v = v.clone();
                v.sort_by(|a, b| b.total_cmp(a));
                v.dedup();
                Ok(v)
            }
        }
    }
}

/// A frozen full-data model with everything needed to score new persons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub outcome: Outcome,
    pub config: FeatureConfig,
    pub space: FeatureSpace,
    pub lambdas: Vec<f64>,
    pub selected_lambda: f64,
    pub fit: LassoFit,
}

impl ModelArtifact {
    pub fn name(&self) -> String {
        self.config.name.clone().unwrap_or_else(|| "model".into())
    }

    pub fn score(&self, cohort: &Cohort, taxonomy: &Taxonomy) -> Result<(Vec<f64>, AlignReport)> {
        let (design, align) = build_design_for_space(cohort, taxonomy, &self.space)?;
        Ok((predict_logit(&self.fit, &design)?, align))
    }
}

/// Fold models at the selected lambda, enough to rebuild cross-fitted indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvArtifact {
    pub outcome: Outcome,
    pub config: FeatureConfig,
    pub space: FeatureSpace,
    pub ids: Vec<String>,
    pub folds: FoldAssignment,
    pub lambdas: Vec<f64>,
    pub mean_auc: Vec<f64>,
    pub selected_index: usize,
    pub fold_models: Vec<LassoFit>,
    pub oof_logit: Vec<f64>,
}

/// Everything a cross-validated run produces.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub outcome: Outcome,
    pub config: FeatureConfig,
    pub space: FeatureSpace,
    pub design: SparseDesignMatrix,
    pub y: Vec<u8>,
    pub cv: CvResult,
    pub full: LassoFit,
}

impl CvRun {
    pub fn model(&self) -> ModelArtifact {
        ModelArtifact {
            outcome: self.outcome,
            config: self.config.clone(),
            space: self.space.clone(),
            lambdas: self.cv.lambdas.clone(),
            selected_lambda: self.cv.selected_lambda,
            fit: self.full.clone(),
        }
    }

    pub fn artifact(&self, cohort: &Cohort) -> CvArtifact {
        CvArtifact {
            outcome: self.outcome,
            config: self.config.clone(),
            space: self.space.clone(),
            ids: cohort.ids().map(str::to_string).collect(),
            folds: self.cv.folds.clone(),
            lambdas: self.cv.lambdas.clone(),
            mean_auc: self.cv.mean_auc.clone(),
            selected_index: self.cv.selected_index,
            fold_models: (0..self.cv.folds.k).map(|f| self.cv.fold_model(f).clone()).collect(),
            oof_logit: self.cv.oof_logit.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvSettings {
    pub folds: usize,
    pub seed: u64,
    pub options: FitOptions,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings {
            folds: 5,
            seed: 0,
            options: FitOptions::default(),
        }
    }
}

/// Builds the design, selects lambda by K-fold CV and refits on all rows.
pub fn run_cv(
    cohort: &Cohort,
    taxonomy: &Taxonomy,
    config: &FeatureConfig,
    outcome: Outcome,
    grid: &LambdaGrid,
    settings: &CvSettings,
) -> Result<CvRun> {
    let (space, design) = build_design(cohort, taxonomy, config)?;
    let y = cohort.labels(outcome);
    let pf = space.penalty_factors();
    let lambdas = grid.resolve(&design, &y, &pf)?;
    let folds = make_folds(&y, settings.folds, settings.seed)?;
    log::info!(
        "cv: {} rows, {} columns, {} lambdas, {} folds",
        design.n_rows(),
        design.n_cols(),
        lambdas.len(),
        folds.k
    );
    let cv = cv_select_lambda(&design, &y, &pf, &lambdas, &folds, &settings.options)?;
    let full = refit_full(&design, &y, &pf, &cv, &settings.options)?;
    Ok(CvRun {
        outcome,
        config: config.clone(),
        space,
        design,
        y,
        cv,
        full,
    })
}

/// Full-data fit at `lambda`, warm-started through the grid values above it.
pub fn fit_at_lambda(
    cohort: &Cohort,
    taxonomy: &Taxonomy,
    config: &FeatureConfig,
    outcome: Outcome,
    grid: &LambdaGrid,
    lambda: f64,
    options: &FitOptions,
) -> Result<ModelArtifact> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidInput(format!("lambda = {lambda}")));
    }
    let (space, design) = build_design(cohort, taxonomy, config)?;
    let y = cohort.labels(outcome);
    let pf = space.penalty_factors();
    let lambdas = grid.resolve(&design, &y, &pf)?;
    let mut path: Vec<f64> = lambdas.iter().copied().filter(|&l| l > lambda).collect();
    path.push(lambda);
    let fit = fit_path(&design, &y, &pf, &path, options)?
        .fits
        .pop()
        .expect("path ends at the requested lambda");
    Ok(ModelArtifact {
        outcome,
        config: config.clone(),
        space,
        lambdas,
        selected_lambda: lambda,
        fit,
    })
}

/// Metrics after shifting logits so their mean probability equals the label mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedEvaluation {
    pub report: EvaluationReport,
    pub shift: f64,
    pub adjusted_logits: Vec<f64>,
}

pub fn adjusted_evaluation(logits: &[f64], labels: &[u8], unit: WoeUnit) -> Result<AdjustedEvaluation> {
    if labels.is_empty() {
        return Err(Error::TooFew("no rows to evaluate".into()));
    }
    let prevalence = labels.iter().filter(|&&v| v == 1).count() as f64 / labels.len() as f64;
    let (adjusted, shift) = prevalence_adjust(logits, prevalence)?;
    let report = EvaluationReport::from_logits(&adjusted, labels, Some(prevalence), unit)?;
    Ok(AdjustedEvaluation {
        report,
        shift,
        adjusted_logits: adjusted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutEvaluation {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub raw_logits: Vec<f64>,
    pub evaluation: AdjustedEvaluation,
    pub align: AlignReport,
    pub excluded: usize,
}

/// Scores a frozen model on a new cohort minus `exclude`, adjusted to its prevalence.
pub fn holdout_eval(
    model: &ModelArtifact,
    taxonomy: &Taxonomy,
    cohort: &Cohort,
    outcome: Outcome,
    exclude: &HashSet<String>,
    unit: WoeUnit,
) -> Result<HoldoutEvaluation> {
    let kept = cohort.filter(|r| !exclude.contains(&r.id));
    let excluded = cohort.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::TooFew("every person of the new cohort is excluded".into()));
    }
    let (raw_logits, align) = model.score(&kept, taxonomy)?;
    if align.unknown_codes > 0 {
        log::warn!("{} codes unknown to the taxonomy were ignored", align.unknown_codes);
    }
    log::debug!("{} codes outside the model's feature space", align.codes_outside_space);
    let labels = kept.labels(outcome);
    let evaluation = adjusted_evaluation(&raw_logits, &labels, unit)?;
    Ok(HoldoutEvaluation {
        ids: kept.ids().map(str::to_string).collect(),
        labels,
        raw_logits,
        evaluation,
        align,
        excluded,
    })
}

/// Predictions produced outside this crate, keyed by person id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPredictions {
    pub name: String,
    /// Restricts the file to one outcome; `None` applies it to every outcome.
    pub outcome: Option<Outcome>,
    pub logits: HashMap<String, f64>,
}

impl ExternalPredictions {
    /// Reads an `id,logit` CSV.
    pub fn load(name: &str, outcome: Option<Outcome>, path: &std::path::Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut logits = HashMap::new();
        for rec in r.deserialize() {
            let (id, logit): (String, f64) = rec?;
            if logits.insert(id.clone(), logit).is_some() {
                return Err(Error::InvalidInput(format!("{}: duplicate id {id}", path.display())));
            }
        }
        Ok(ExternalPredictions {
            name: name.to_string(),
            outcome,
            logits,
        })
    }

    /// Logits in cohort order; every cohort id must be present and no others.
    pub fn align(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        let out = cohort
            .ids()
            .map(|id| {
                self.logits
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Dimension(format!("external predictions {:?} lack id {id}", self.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.logits.len() != cohort.len() {
            return Err(Error::Dimension(format!(
                "external predictions {:?} have {} ids, cohort has {}",
                self.name,
                self.logits.len(),
                cohort.len()
            )));
        }
        Ok(out)
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub outcome: Outcome,
    pub model: String,
    /// `cv` for out-of-fold predictions, `holdout` for a frozen model on new data.
    pub setup: String,
    pub auc: f64,
    pub lambda_woe: f64,
    pub log_lik: f64,
    pub n: usize,
    pub n_pos: usize,
}

impl BenchmarkRow {
    fn new(outcome: Outcome, model: &str, setup: &str, r: &EvaluationReport) -> Self {
        BenchmarkRow {
            outcome,
            model: model.to_string(),
            setup: setup.to_string(),
            auc: r.auc,
            lambda_woe: r.lambda_woe,
            log_lik: r.log_lik,
            n: r.n,
            n_pos: r.n_pos,
        }
    }
}

/// Adjusted predictions behind one benchmark row, for re-evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkPredictions {
    pub outcome: Outcome,
    pub model: String,
    pub setup: String,
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
    pub predictions: Vec<BenchmarkPredictions>,
}

pub fn write_benchmark_csv(rows: &[BenchmarkRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "outcome",
        "model",
        "setup",
        "auc",
        "lambda_woe",
        "log_lik",
        "n",
        "n_pos",
    ])?;
    for r in rows {
        w.write_record([
            r.outcome.to_string(),
            r.model.clone(),
            r.setup.clone(),
            r.auc.to_string(),
            r.lambda_woe.to_string(),
            r.log_lik.to_string(),
            r.n.to_string(),
            r.n_pos.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Name used for `configs[i]` in benchmark output.
pub fn config_label(config: &FeatureConfig, i: usize) -> String {
    config.name.clone().unwrap_or_else(|| format!("config{i}"))
}

/// Runs the CV pipeline per config and outcome, and evaluates external
/// predictions, all prevalence-adjusted before the metrics. With a holdout
/// cohort, each frozen full-data model is also scored there.
pub fn benchmark(
    cohort: &Cohort,
    taxonomy: &Taxonomy,
    configs: &[FeatureConfig],
    externals: &[ExternalPredictions],
    outcomes: &[Outcome],
    grid: &LambdaGrid,
    settings: &CvSettings,
    holdout: Option<&Cohort>,
    unit: WoeUnit,
) -> Result<BenchmarkResult> {
    if configs.is_empty() && externals.is_empty() {
        return Err(Error::InvalidInput("nothing to benchmark".into()));
    }
    let ids: Vec<String> = cohort.ids().map(str::to_string).collect();
    let mut out = BenchmarkResult::default();
    for &outcome in outcomes {
        let y = cohort.labels(outcome);
        for (i, config) in configs.iter().enumerate() {
            let name = config_label(config, i);
            let context = |e: Error| Error::Config(format!("config {name:?}, outcome {outcome}: {e}"));
            let run = run_cv(cohort, taxonomy, config, outcome, grid, settings).map_err(context)?;
            let eval = adjusted_evaluation(&run.cv.oof_logit, &y, unit).map_err(context)?;
            log::info!(
                "{name}/{outcome}: cv auc {:.4}, loglik {:.2}",
                eval.report.auc,
                eval.report.log_lik
            );
            out.rows.push(BenchmarkRow::new(outcome, &name, "cv", &eval.report));
            out.predictions.push(BenchmarkPredictions {
                outcome,
                model: name.clone(),
                setup: "cv".into(),
                ids: ids.clone(),
                labels: y.clone(),
                logits: eval.adjusted_logits,
            });
            if let Some(h) = holdout {
                let r = holdout_eval(&run.model(), taxonomy, h, outcome, &HashSet::new(), unit).map_err(context)?;
                out.rows
                    .push(BenchmarkRow::new(outcome, &name, "holdout", &r.evaluation.report));
                out.predictions.push(BenchmarkPredictions {
                    outcome,
                    model: name.clone(),
                    setup: "holdout".into(),
                    ids: r.ids,
                    labels: r.labels,
                    logits: r.evaluation.adjusted_logits,
                });
            }
        }
        for ext in externals.iter().filter(|e| e.outcome.is_none_or(|o| o == outcome)) {
            let (setup, target) = match ext.align(cohort) {
                Ok(l) => ("cv", (l, cohort)),
                Err(e) => match holdout {
                    Some(h) => ("holdout", (ext.align(h)?, h)),
                    None => return Err(e),
                },
            };
            let (logits, c) = target;
            let labels = c.labels(outcome);
            let eval = adjusted_evaluation(&logits, &labels, unit)?;
            out.rows
                .push(BenchmarkRow::new(outcome, &ext.name, setup, &eval.report));
            out.predictions.push(BenchmarkPredictions {
                outcome,
                model: ext.name.clone(),
                setup: setup.into(),
                ids: c.ids().map(str::to_string).collect(),
                labels,
                logits: eval.adjusted_logits,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(
            "50:1e-4".parse::<LambdaGrid>().unwrap(),
            LambdaGrid::Geometric {
                count: 50,
                min_ratio: 1e-4
            }
        );
        assert_eq!(
            "20".parse::<LambdaGrid>().unwrap(),
            LambdaGrid::Geometric {
                count: 20,
                min_ratio: DEFAULT_MIN_RATIO
            }
        );
        assert_eq!(
            "list:0.1, 0.01".parse::<LambdaGrid>().unwrap(),
            LambdaGrid::Explicit(vec![0.1, 0.01])
        );
        assert!("0".parse::<LambdaGrid>().is_err());
        assert!("5:2".parse::<LambdaGrid>().is_err());
        assert!("list:".parse::<LambdaGrid>().is_err());
        assert!("list:-1".parse::<LambdaGrid>().is_err());
    }

    #[test]
    fn explicit_grid_sorted_descending() {
        let d = SparseDesignMatrix::from_dense_binary(&[vec![1], vec![0]]).unwrap();
        let g = LambdaGrid::Explicit(vec![0.01, 0.1, 0.01]);
        assert_eq!(g.resolve(&d, &[1, 0], &[1.0]).unwrap(), vec![0.1, 0.01]);
    }

    #[test]
    fn adjusted_evaluation_matches_prevalence() {
        let logits = [-3.0, -1.0, 0.5, 2.0, -2.0];
        let labels = [0, 0, 1, 1, 0];
        let e = adjusted_evaluation(&logits, &labels, WoeUnit::Nats).unwrap();
        let mean = e
            .adjusted_logits
            .iter()
            .map(|&l| crate::solver::sigmoid(l))
            .sum::<f64>()
            / 5.0;
        assert!((mean - 0.4).abs() < 1e-8);
        assert_eq!(e.report.auc, 1.0);
        assert_eq!(e.report.prior, 0.4);
    }
}
