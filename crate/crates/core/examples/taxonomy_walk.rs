//! Build a small code hierarchy, walk it, and expand a person's codes.

use claimrisk::featurize::expand_codes;
use claimrisk::taxonomy::{CodeNode, CodeSystemId, Taxonomy};

fn main() -> claimrisk::Result<()> {
    use CodeSystemId::*;
    let nodes = vec![
        CodeNode::new(Icd, "I", 1, None).with_name("Infectious diseases"),
        CodeNode::new(Icd, "A00-A09", 2, Some("I")),
        CodeNode::new(Icd, "A09", 3, Some("A00-A09")),
        CodeNode::new(Icd, "A09.0", 4, Some("A09")),
        CodeNode::new(Icd, "A09.9", 4, Some("A09")),
        CodeNode::new(Atc, "C", 1, None),
        CodeNode::new(Atc, "C07", 2, Some("C")),
        CodeNode::new(Atc, "C07A", 3, Some("C07")),
    ];
    let tax = Taxonomy::from_nodes(nodes)?;

    for (system, level, count) in tax.level_counts().rows() {
        if count > 0 {
            println!("{} level {level}: {count} codes", system.as_str());
        }
    }

    let chain: Vec<&str> = tax.ancestors(Icd, "A09.9")?.iter().map(|n| n.code.as_str()).collect();
    println!("ancestors of A09.9: {}", chain.join(" -> "));

    let person = vec![
        (Icd, "A09.0".to_string()),
        (Icd, "A09.9".to_string()),
        (Atc, "C07A".to_string()),
    ];
    let expanded = expand_codes(&tax, &person)?;
    println!(
        "{} recorded codes expand to {} active nodes:",
        person.len(),
        expanded.len()
    );
    for (system, code) in &expanded {
        println!("  {}:{code}", system.as_str());
    }

    let mut tsv = Vec::new();
    tax.write(&mut tsv).expect("in-memory write");
    let back = Taxonomy::read(tsv.as_slice(), "memory")?;
    assert_eq!(back.len(), tax.len());
    Ok(())
}
