//! Turn a synthetic cohort into a sparse design matrix under two feature configs.

use claimrisk::featurize::{build_design, column_prevalence, ColumnKind, FeatureConfig};
use claimrisk::synth::{generate_cohort, generate_taxonomy, GeneratorSpec};

fn main() -> claimrisk::Result<()> {
    let spec = GeneratorSpec::preset(2_000, 3);
    let tax = generate_taxonomy(&spec)?;
    let cohort = generate_cohort(&tax, &spec)?.cohort;

    let full = FeatureConfig::default();
    let coarse = FeatureConfig {
        name: Some("level2".into()),
        levels: Some(vec![2]),
        include_incidence: false,
        ..FeatureConfig::default()
    };
    for config in [&full, &coarse] {
        let (space, design) = build_design(&cohort, &tax, config)?;
        let codes = space
            .columns()
            .iter()
            .filter(|c| c.kind == ColumnKind::CodeDummy)
            .count();
        println!(
            "{:<8} {} rows x {} columns ({codes} code columns), {} nonzeros",
            config.name.as_deref().unwrap_or("full"),
            design.n_rows(),
            design.n_cols(),
            design.binary_nnz()
        );
        let prevalence = column_prevalence(&design);
        let mut top: Vec<usize> = (0..space.len()).collect();
        top.sort_by_key(|&j| std::cmp::Reverse(prevalence[j]));
        for &j in top.iter().take(3) {
            let c = space.column(j);
            println!(
                "  {:<24} penalty {:.0}  persons {}",
                c.name, c.penalty_factor, prevalence[j]
            );
        }
    }
    Ok(())
}
