//! Generate a synthetic taxonomy and cohort with planted effects, write them
//! to disk, and read them back.

use std::collections::BTreeMap;

use claimrisk::cohort::{Cohort, Outcome};
use claimrisk::synth::{codes_at_level, generate_cohort, generate_taxonomy, read_sidecar, GeneratorSpec};
use claimrisk::taxonomy::{CodeSystemId, Taxonomy};

fn main() -> claimrisk::Result<()> {
    let mut spec = GeneratorSpec::preset(1_000, 99);
    let tax = generate_taxonomy(&spec)?;
    for (system, level, count) in tax.level_counts().rows() {
        if count > 0 {
            println!("{} L{level}: {count}", system.as_str());
        }
    }
    spec.planted
        .insert(codes_at_level(&tax, CodeSystemId::Ops, 3)[0].clone(), 1.0);
    let synth = generate_cohort(&tax, &spec)?;

    let dir = tempfile::tempdir().expect("temporary directory");
    tax.save(dir.path().join("taxonomy.tsv"))?;
    synth.cohort.save(dir.path().join("cohort.jsonl"))?;
    synth.write_sidecar(&dir.path().join("truth.csv"))?;

    let tax2 = Taxonomy::load(dir.path().join("taxonomy.tsv"))?;
    let cohort = Cohort::load(dir.path().join("cohort.jsonl"), &BTreeMap::new())?;
    let truth = read_sidecar(&dir.path().join("truth.csv"))?;
    assert_eq!(tax2.len(), tax.len());
    assert_eq!(cohort.len(), truth.len());

    for outcome in Outcome::ALL {
        let cases = cohort.labels(outcome).iter().filter(|&&y| y == 1).count();
        println!("{outcome}: {cases} of {} persons", cohort.len());
    }
    let codes: usize = cohort.records().iter().map(|r| r.codes.len()).sum();
    println!("{:.1} recorded codes per person", codes as f64 / cohort.len() as f64);
    Ok(())
}
