//! Cross-fitted risk index with age and gender cancelled, then age profiles of
//! risk with and without conditioning on the index.

use claimrisk::cohort::Outcome;
use claimrisk::featurize::FeatureConfig;
use claimrisk::pipeline::{run_cv, CvSettings, LambdaGrid};
use claimrisk::riskindex::{
    build_risk_index, feature_dummies, fit_conditional_profile, score_distribution, uniform_edges, ProfileData,
};
use claimrisk::synth::{codes_at_level, generate_cohort, generate_taxonomy, GeneratorSpec};
use claimrisk::taxonomy::CodeSystemId;

fn main() -> claimrisk::Result<()> {
    let mut spec = GeneratorSpec::preset(8_000, 5);
    spec.age_correlation = 0.6;
    let tax = generate_taxonomy(&spec)?;
    spec.intercept = -3.5;
    spec.planted = [
        (codes_at_level(&tax, CodeSystemId::Icd, 2)[2].clone(), 0.9),
        (codes_at_level(&tax, CodeSystemId::Atc, 2)[3].clone(), 0.8),
        ("age_group=85-89".to_string(), 0.3),
    ]
    .into_iter()
    .collect();
    let cohort = generate_cohort(&tax, &spec)?.cohort;
    let grid = LambdaGrid::Geometric {
        count: 12,
        min_ratio: 1e-2,
    };
    let run = run_cv(
        &cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y2,
        &grid,
        &CvSettings::default(),
    )?;

    let cancel = feature_dummies(&run.space, &["age_group", "gender"]);
    println!("cancelling {} demographic columns", cancel.len());
    let index = build_risk_index(&run.cv, &run.design, &run.space, &cancel)?;

    let groups: Vec<String> = cohort
        .records()
        .iter()
        .map(|r| r.categorical["gender"].clone())
        .collect();
    let (lo, hi) = index
        .scores
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
    for row in score_distribution(&index.scores, &groups, &uniform_edges(lo, hi, 6))? {
        println!("  {} [{:+.2}, {:+.2}) {}", row.group, row.bin_lo, row.bin_hi, row.count);
    }

    let data = ProfileData::from_cohort(&cohort, &index, "age_group", "gender", Outcome::Y2)?;
    for pair in fit_conditional_profile(&data, None)? {
        let (a, b) = pair.age_range;
        println!(
            "{}: logit rise from age {a} to {b}: unconditional {:+.3}, given the index {:+.3}",
            pair.gender,
            pair.unconditional.rise(a, b),
            pair.conditional.rise(a, b)
        );
    }
    Ok(())
}
