//! AUC, ROC curve, expected weight of evidence and prevalence adjustment.

use claimrisk::metrics::{auc, prevalence_adjust, roc_area, roc_curve, EvaluationReport, WoeUnit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> claimrisk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5_000;
    let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.05) as u8).collect();
    // A noisy score that is shifted upward for cases and badly calibrated overall.
    let logits: Vec<f64> = labels
        .iter()
        .map(|&y| 1.0 + 1.5 * y as f64 + rng.random_range(-2.0..2.0))
        .collect();

    let a = auc(&logits, &labels)?;
    let curve = roc_curve(&logits, &labels)?;
    println!(
        "AUC {a:.4}, ROC area {:.4} over {} points",
        roc_area(&curve),
        curve.len()
    );

    let raw = EvaluationReport::from_logits(&logits, &labels, None, WoeUnit::Bits)?;
    let prevalence = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
    let (adjusted, shift) = prevalence_adjust(&logits, prevalence)?;
    let fixed = EvaluationReport::from_logits(&adjusted, &labels, Some(prevalence), WoeUnit::Bits)?;

    println!("prevalence {prevalence:.4}, intercept shift {shift:+.3}");
    println!(
        "raw:      Lambda {:+.4} bits, log-lik {:.1}",
        raw.lambda_woe, raw.log_lik
    );
    println!(
        "adjusted: Lambda {:+.4} bits, log-lik {:.1}",
        fixed.lambda_woe, fixed.log_lik
    );
    assert_eq!(raw.auc, fixed.auc);
    Ok(())
}
