//! Stratified K-fold selection of lambda by mean held-out AUC, then a full refit.

use claimrisk::cohort::Outcome;
use claimrisk::featurize::FeatureConfig;
use claimrisk::pipeline::{run_cv, CvSettings, LambdaGrid};
use claimrisk::synth::{codes_at_level, generate_cohort, generate_taxonomy, GeneratorSpec};
use claimrisk::taxonomy::CodeSystemId;

fn main() -> claimrisk::Result<()> {
    let mut spec = GeneratorSpec::preset(4_000, 11);
    let tax = generate_taxonomy(&spec)?;
    spec.intercept = -3.0;
    spec.planted = [
        (codes_at_level(&tax, CodeSystemId::Icd, 2)[1].clone(), 1.0),
        (codes_at_level(&tax, CodeSystemId::Atc, 3)[4].clone(), 0.8),
        ("age_group=80-84".to_string(), 0.7),
    ]
    .into_iter()
    .collect();
    let cohort = generate_cohort(&tax, &spec)?.cohort;

    let grid = LambdaGrid::Geometric {
        count: 12,
        min_ratio: 1e-2,
    };
    let settings = CvSettings {
        folds: 5,
        seed: 1,
        ..CvSettings::default()
    };
    let run = run_cv(&cohort, &tax, &FeatureConfig::default(), Outcome::Y2, &grid, &settings)?;

    println!("{:>10} {:>8}", "lambda", "meanAUC");
    for (i, (l, a)) in run.cv.lambdas.iter().zip(&run.cv.mean_auc).enumerate() {
        let mark = if i == run.cv.selected_index { " <" } else { "" };
        println!("{l:>10.6} {a:>8.4}{mark}");
    }
    println!(
        "full refit at lambda {:.6}: {} nonzero of {} columns",
        run.full.lambda,
        run.full.n_nonzero,
        run.space.len()
    );
    let mut strongest = run.full.coefficients.clone();
    strongest.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    for (j, b) in strongest.iter().take(5) {
        println!("  {:<20} {b:+.3}", run.space.column(*j).name);
    }
    Ok(())
}
