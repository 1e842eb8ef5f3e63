use std::collections::HashSet;

use claimrisk::cohort::{Cohort, Outcome};
use claimrisk::featurize::FeatureConfig;
use claimrisk::metrics::{EvaluationReport, WoeUnit};
use claimrisk::pipeline::{benchmark, fit_at_lambda, holdout_eval, run_cv, CvSettings, LambdaGrid};
use claimrisk::riskindex::{build_risk_index, feature_dummies, risk_index_from_models};
use claimrisk::solver::{predict_logit, sigmoid};
use claimrisk::synth::{generate_cohort, generate_taxonomy, GeneratorSpec};
use claimrisk::taxonomy::Taxonomy;

fn world(n: usize, seed: u64) -> (Taxonomy, Cohort, GeneratorSpec) {
    let mut spec = GeneratorSpec::preset(n, seed);
    let tax = generate_taxonomy(&spec).unwrap();
    spec.plant_default_effects(&tax);
    spec.intercept = -3.0;
    let cohort = generate_cohort(&tax, &spec).unwrap().cohort;
    (tax, cohort, spec)
}

fn grid() -> LambdaGrid {
    LambdaGrid::Geometric {
        count: 10,
        min_ratio: 1e-2,
    }
}

#[test]
fn benchmark_dumps_reproduce_reported_metrics() {
    let (tax, cohort, mut spec) = world(3_000, 12);
    spec.seed += 100;
    let holdout = generate_cohort(&tax, &spec).unwrap().cohort;
    let configs = [
        FeatureConfig {
            name: Some("full".into()),
            ..FeatureConfig::default()
        },
        FeatureConfig {
            name: Some("demo".into()),
            ..FeatureConfig::categorical_only(&["age_group", "gender"])
        },
    ];
    let result = benchmark(
        &cohort,
        &tax,
        &configs,
        &[],
        &[Outcome::Y1, Outcome::Y2],
        &grid(),
        &CvSettings::default(),
        Some(&holdout),
        WoeUnit::Bits,
    )
    .unwrap();
    assert_eq!(result.rows.len(), 8);
    assert_eq!(result.predictions.len(), 8);
    for (row, dump) in result.rows.iter().zip(&result.predictions) {
        assert_eq!(
            (row.outcome, &row.model, &row.setup),
            (dump.outcome, &dump.model, &dump.setup)
        );
        let n_pos = dump.labels.iter().filter(|&&y| y == 1).count();
        let prevalence = n_pos as f64 / dump.labels.len() as f64;
        let mean_p = dump.logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / dump.logits.len() as f64;
        assert!(
            (mean_p - prevalence).abs() < 1e-8,
            "{}/{}: mean {mean_p} vs {prevalence}",
            row.model,
            row.setup
        );
        let again = EvaluationReport::from_logits(&dump.logits, &dump.labels, Some(prevalence), WoeUnit::Bits).unwrap();
        assert_eq!(again.auc, row.auc);
        assert_eq!(again.lambda_woe, row.lambda_woe);
        assert_eq!(again.log_lik, row.log_lik);
        assert_eq!((again.n, again.n_pos), (row.n, row.n_pos));
    }
}

#[test]
fn holdout_on_training_cohort_is_in_sample() {
    let (tax, cohort, _) = world(2_500, 13);
    let run = run_cv(
        &cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y2,
        &grid(),
        &CvSettings::default(),
    )
    .unwrap();
    let model = run.model();
    let h = holdout_eval(&model, &tax, &cohort, Outcome::Y2, &HashSet::new(), WoeUnit::Nats).unwrap();
    assert_eq!(h.raw_logits, predict_logit(&run.full, &run.design).unwrap());
    assert_eq!(h.excluded, 0);

    let drop: HashSet<String> = cohort.ids().step_by(3).map(str::to_string).collect();
    let h = holdout_eval(&model, &tax, &cohort, Outcome::Y2, &drop, WoeUnit::Nats).unwrap();
    assert_eq!(h.excluded, drop.len());
    assert_eq!(h.ids.len() + drop.len(), cohort.len());
    assert!(h.ids.iter().all(|id| !drop.contains(id)));
}

#[test]
fn fixed_lambda_fit_matches_cv_refit() {
    let (tax, cohort, _) = world(2_500, 14);
    let config = FeatureConfig::default();
    let run = run_cv(&cohort, &tax, &config, Outcome::Y2, &grid(), &CvSettings::default()).unwrap();
    let fixed = fit_at_lambda(
        &cohort,
        &tax,
        &config,
        Outcome::Y2,
        &grid(),
        run.cv.selected_lambda,
        &CvSettings::default().options,
    )
    .unwrap();
    let (a, b) = (fixed.fit.dense_coefficients(), run.full.dense_coefficients());
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "max coefficient difference {worst:e}");
    assert!((fixed.fit.intercept - run.full.intercept).abs() <= 1e-12);
}

#[test]
fn saved_cv_artifact_rebuilds_the_index() {
    let (tax, cohort, _) = world(2_500, 15);
    let run = run_cv(
        &cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y2,
        &grid(),
        &CvSettings::default(),
    )
    .unwrap();
    let cancel = feature_dummies(&run.space, &["gender"]);
    let direct = build_risk_index(&run.cv, &run.design, &run.space, &cancel).unwrap();

    let artifact = run.artifact(&cohort);
    let text = serde_json::to_string(&artifact).unwrap();
    let back: claimrisk::pipeline::CvArtifact = serde_json::from_str(&text).unwrap();
    let rebuilt = risk_index_from_models(&back.fold_models, &back.folds, &run.design, &back.space, &cancel).unwrap();
    assert_eq!(rebuilt.scores, direct.scores);
    assert_eq!(back.ids.len(), cohort.len());
}
