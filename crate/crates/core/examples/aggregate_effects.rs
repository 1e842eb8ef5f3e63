//! Per-code total effects along the hierarchy and population-weighted group importance.

use claimrisk::aggregate::{export_coefficients, population_importance, EffectContext};
use claimrisk::cohort::Outcome;
use claimrisk::featurize::FeatureConfig;
use claimrisk::pipeline::{run_cv, CvSettings, LambdaGrid};
use claimrisk::synth::{codes_at_level, generate_cohort, generate_taxonomy, GeneratorSpec};
use claimrisk::taxonomy::CodeSystemId;

fn main() -> claimrisk::Result<()> {
    let mut spec = GeneratorSpec::preset(4_000, 21);
    let tax = generate_taxonomy(&spec)?;
    let chapter = codes_at_level(&tax, CodeSystemId::Icd, 1)[0].clone();
    spec.intercept = -3.0;
    spec.planted = [
        (chapter.clone(), 0.9),
        (codes_at_level(&tax, CodeSystemId::Icd, 4)[2].clone(), 0.8),
    ]
    .into_iter()
    .collect();
    let cohort = generate_cohort(&tax, &spec)?.cohort;
    let grid = LambdaGrid::Geometric {
        count: 10,
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

    let ctx = EffectContext::new(&run.full, &run.space, &tax, &run.design)?;
    let code = chapter.split_once(':').map(|(_, c)| c).unwrap_or(&chapter);
    let effect = ctx.total_code_effect(CodeSystemId::Icd, code)?;
    println!(
        "{code}: own {:+.3}, total log-OR {:+.3}, OR {:.2}, {} persons",
        effect.own_coef, effect.total_logor, effect.total_or, effect.prevalence
    );

    let groups = population_importance(ctx.all_groups(&[CodeSystemId::Icd, CodeSystemId::Atc])?);
    println!(
        "{:>4} {:<12} {:>8} {:>6} {:>10}",
        "rank", "group", "logOR", "size", "importance"
    );
    for g in groups.iter().take(6) {
        println!(
            "{:>4} {:<12} {:>+8.3} {:>6} {:>10.2}",
            g.rank,
            g.label(),
            g.group_logor,
            g.group_size,
            g.importance
        );
    }

    let (rows, meta) = export_coefficients(&ctx, 200)?;
    println!(
        "exported {} effect rows at lambda {:.5}; nonzero per system: {:?}",
        rows.len(),
        meta.lambda,
        meta.nonzero_by_system
    );
    Ok(())
}
