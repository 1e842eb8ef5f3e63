//! Compare feature configurations and an external score, in cross-validation
//! and on a second cohort drawn from the same generator.

use claimrisk::cohort::Outcome;
use claimrisk::featurize::FeatureConfig;
use claimrisk::metrics::WoeUnit;
use claimrisk::pipeline::{benchmark, CvSettings, ExternalPredictions, LambdaGrid};
use claimrisk::synth::{codes_at_level, generate_cohort, generate_taxonomy, GeneratorSpec};
use claimrisk::taxonomy::CodeSystemId;

fn main() -> claimrisk::Result<()> {
    let mut spec = GeneratorSpec::preset(4_000, 31);
    let tax = generate_taxonomy(&spec)?;
    spec.intercept = -3.2;
    spec.planted = [
        (codes_at_level(&tax, CodeSystemId::Icd, 4)[3].clone(), 1.2),
        (codes_at_level(&tax, CodeSystemId::Atc, 5)[8].clone(), 1.4),
        ("age_group=80-84".to_string(), 0.8),
    ]
    .into_iter()
    .collect();
    let train = generate_cohort(&tax, &spec)?;
    spec.seed += 1;
    let holdout = generate_cohort(&tax, &spec)?.cohort;

    let configs = vec![
        FeatureConfig {
            name: Some("full".into()),
            ..FeatureConfig::default()
        },
        FeatureConfig {
            name: Some("age-gender".into()),
            ..FeatureConfig::categorical_only(&["age_group", "gender"])
        },
    ];
    // The generator's true logit plays the part of a score computed elsewhere.
    let oracle = ExternalPredictions {
        name: "truth".into(),
        outcome: None,
        logits: train
            .cohort
            .ids()
            .map(str::to_string)
            .zip(train.true_logit.iter().copied())
            .collect(),
    };

    let result = benchmark(
        &train.cohort,
        &tax,
        &configs,
        &[oracle],
        &[Outcome::Y2],
        &LambdaGrid::Geometric {
            count: 10,
            min_ratio: 1e-2,
        },
        &CvSettings::default(),
        Some(&holdout),
        WoeUnit::Bits,
    )?;
    println!(
        "{:<11} {:<8} {:>6} {:>8} {:>10}",
        "model", "setup", "AUC", "Lambda", "log-lik"
    );
    for r in &result.rows {
        println!(
            "{:<11} {:<8} {:>6.3} {:>8.4} {:>10.1}",
            r.model, r.setup, r.auc, r.lambda_woe, r.log_lik
        );
    }
    Ok(())
}
