//! Acceptance gate. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any fails.
//!
//! Pass substrings as arguments to run a subset, e.g. `cargo test --test
//! acceptance -- c6 c11`.

mod common;

use std::collections::BTreeSet;
use std::panic::AssertUnwindSafe;
use std::time::{Duration, Instant};

use claimrisk::cohort::{Cohort, Outcome, PersonRecord};
use claimrisk::cv::{cv_select_lambda, make_folds, refit_full, CvResult};
use claimrisk::featurize::{
    build_design, code_column_name, expand_codes, DesignColumn, FeatureConfig, SparseDesignMatrix,
};
use claimrisk::metrics::{auc, expected_weight_of_evidence, prevalence_adjust, roc_area, roc_curve, WoeUnit};
use claimrisk::pipeline::{benchmark, run_cv, BenchmarkRow, CvSettings, LambdaGrid};
use claimrisk::riskindex::{
    build_risk_index, cancellation_contribution, feature_dummies, fit_conditional_profile, ProfileData,
};
use claimrisk::solver::{
    fit_logistic_lasso, kkt_residual, lambda_grid, lambda_max, sigmoid, FitOptions, LassoFit, KKT_EPS,
};
use claimrisk::synth::{codes_at_level, generate_cohort, generate_taxonomy, GeneratorSpec};
use claimrisk::taxonomy::{CodeNode, CodeSystemId, Taxonomy};
use claimrisk::Error;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Verdict); 11] = [
        ("c1", "solver matches proximal-gradient oracle", c1_oracle),
        ("c2", "KKT certification", c2_kkt),
        ("c3", "penalty scaling identity", c3_scaling),
        ("c4", "hierarchy expansion properties", c4_hierarchy),
        ("c5", "metric oracles", c5_metrics),
        ("c6", "planted effect recovery", c6_planted),
        ("c7", "feature config ordering", c7_ordering),
        ("c8", "cross-fit leakage", c8_leakage),
        ("c9", "cancellation linearity", c9_cancellation),
        ("c10", "conditional age profile", c10_profile),
        ("c11", "performance envelope", c11_performance),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (tag, name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|x| x == tag) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_penalties(r: &mut ChaCha8Rng, p: usize, with_dense: bool) -> Vec<f64> {
    let mut pf: Vec<f64> = (0..p).map(|_| r.random_range(0..=5) as f64).collect();
    if with_dense {
        pf[p - 1] = 0.0;
    }
    pf
}

fn c1_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = common::rng(101);
    let mut worst: f64 = 0.0;
    let (mut done, mut skipped) = (0, 0);
    while done < 200 {
        let n = r.random_range(10..=50);
        let p = r.random_range(1..=10);
        let with_dense = r.random_bool(0.3);
        let (x, y) = common::random_instance(&mut r, n, p, with_dense);
        let pf = random_penalties(&mut r, p, with_dense);
        let design = common::to_design(&x, with_dense);
        let lmax = match lambda_max(&design, &y, &pf) {
            Ok(v) => v,
            Err(Error::Separation(_) | Error::DegenerateOutcome { .. } | Error::InvalidInput(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        let lambda = lmax * r.random_range(0.01..1.2);
        let fit = fit_logistic_lasso(&design, &y, &pf, lambda, &FitOptions::default(), None)
            .map_err(|e| format!("instance {done}: {e}"))?;
        ensure!(fit.converged, "instance {done} did not converge");
        let (oracle, _, _) = common::fista_oracle(&x, &y, &pf, lambda, 1e-10);
        let ours = common::dense_objective(&x, &y, &pf, lambda, fit.intercept, &fit.dense_coefficients());
        let gap = (ours - oracle).abs();
        worst = worst.max(gap);
        ensure!(gap <= 1e-5, "instance {done}: objective {ours} vs oracle {oracle}");
        done += 1;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "200 instances, max |gap| {worst:.2e} (redrawn {skipped} degenerate), {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn check_kkt(design: &SparseDesignMatrix, y: &[u8], pf: &[f64], fit: &LassoFit, what: &str) -> Result<f64, String> {
    ensure!(fit.converged, "{what}: not converged");
    let k = kkt_residual(design, y, pf, fit);
    ensure!(k <= KKT_EPS, "{what}: KKT residual {k:e}");
    Ok(k)
}

fn c2_kkt() -> Verdict {
    let mut r = common::rng(202);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut null_fits = 0;
    // Random instances with an unpenalized continuous column, including lambda above lambda_max.
    let mut done = 0;
    while done < 100 {
        let n = r.random_range(30..=80);
        let p = r.random_range(2..=8);
        let (x, y) = common::random_instance(&mut r, n, p, true);
        let pf = random_penalties(&mut r, p, true);
        let design = common::to_design(&x, true);
        let Ok(lmax) = lambda_max(&design, &y, &pf) else {
            continue;
        };
        for mult in [2.0, 1.0, 0.3, 0.05] {
            let fit = fit_logistic_lasso(&design, &y, &pf, lmax * mult, &FitOptions::default(), None)
                .map_err(|e| e.to_string())?;
            worst = worst.max(check_kkt(
                &design,
                &y,
                &pf,
                &fit,
                &format!("instance {done} at {mult} lambda_max"),
            )?);
            checked += 1;
            if mult >= 1.0 {
                let penalized_nonzero = fit.coefficients.iter().filter(|(j, _)| pf[*j] > 0.0).count();
                ensure!(
                    penalized_nonzero == 0,
                    "instance {done}: {penalized_nonzero} nonzero at lambda >= lambda_max: {:?}",
                    fit.coefficients
                );
                null_fits += 1;
            }
        }
        done += 1;
    }
    // Every fold fit and the refit of a full pipeline run with an incidence column.
    let mut spec = GeneratorSpec::preset(5_000, 22);
    let tax = generate_taxonomy(&spec).map_err(|e| e.to_string())?;
    spec.planted = [
        (codes_at_level(&tax, CodeSystemId::Icd, 3)[4].clone(), 1.0),
        ("incidence".to_string(), 0.004),
    ]
    .into_iter()
    .collect();
    spec.intercept = -3.5;
    let s = generate_cohort(&tax, &spec).map_err(|e| e.to_string())?;
    let grid = LambdaGrid::Geometric {
        count: 20,
        min_ratio: 1e-3,
    };
    let run = run_cv(
        &s.cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y2,
        &grid,
        &CvSettings::default(),
    )
    .map_err(|e| e.to_string())?;
    let pf = run.space.penalty_factors();
    ensure!(pf.contains(&0.0), "pipeline design lacks an unpenalized column");
    for f in 0..run.cv.folds.k {
        let rows = run.cv.folds.train_rows(f);
        let xtr = run.design.select_rows(&rows);
        let ytr: Vec<u8> = rows.iter().map(|&i| run.y[i]).collect();
        for (j, fit) in run.cv.fold_fits[f].fits.iter().enumerate() {
            worst = worst.max(check_kkt(&xtr, &ytr, &pf, fit, &format!("fold {f} lambda {j}"))?);
            checked += 1;
        }
    }
    worst = worst.max(check_kkt(&run.design, &run.y, &pf, &run.full, "full refit")?);
    checked += 1;
    Ok(format!(
        "{checked} fits ({null_fits} at lambda >= lambda_max), max residual {worst:.2e} <= {KKT_EPS:e}"
    ))
}

fn c3_scaling() -> Verdict {
    let mut r = common::rng(303);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 50 {
        let n = r.random_range(20..=60);
        let p = r.random_range(2..=10);
        let with_dense = r.random_bool(0.3);
        let (x, y) = common::random_instance(&mut r, n, p, with_dense);
        let pf = random_penalties(&mut r, p, with_dense);
        let design = common::to_design(&x, with_dense);
        let Ok(lmax) = lambda_max(&design, &y, &pf) else {
            continue;
        };
        let lambda = lmax * r.random_range(0.05..0.9);
        let opts = FitOptions::default();
        let a = fit_logistic_lasso(&design, &y, &pf, lambda, &opts, None).map_err(|e| e.to_string())?;
        let pf2: Vec<f64> = pf.iter().map(|v| 2.0 * v).collect();
        let b = fit_logistic_lasso(&design, &y, &pf2, lambda / 2.0, &opts, None).map_err(|e| e.to_string())?;
        check_kkt(&design, &y, &pf, &a, "fit(v, lambda)")?;
        check_kkt(&design, &y, &pf2, &b, "fit(2v, lambda/2)")?;
        let (da, db) = (a.dense_coefficients(), b.dense_coefficients());
        let diff = da
            .iter()
            .zip(&db)
            .map(|(u, v)| (u - v).abs())
            .fold((a.intercept - b.intercept).abs(), f64::max);
        worst = worst.max(diff);
        ensure!(diff <= 1e-8, "instance {done}: coefficients differ by {diff:e}");
        done += 1;
    }
    Ok(format!("50 instances, max coefficient difference {worst:.2e}"))
}

/// Random irregular forest per system plus random persons observing codes at any level.
fn random_taxonomy(r: &mut ChaCha8Rng) -> (Taxonomy, Vec<Vec<(CodeSystemId, String)>>) {
    let mut nodes = Vec::new();
    let mut counter = 0usize;
    for system in CodeSystemId::ALL {
        let root = system.root_level();
        let roots = r.random_range(1..=3);
        let mut frontier: Vec<(String, u8)> = Vec::new();
        for _ in 0..roots {
            counter += 1;
            let code = match system {
                CodeSystemId::Ops => format!("{}x{counter}", ['5', '6', '8'][counter % 3]),
                _ => format!("c{counter}"),
            };
            nodes.push(CodeNode::new(system, &code, root, None));
            frontier.push((code, root));
        }
        while let Some((parent, level)) = frontier.pop() {
            if level >= system.max_level() {
                continue;
            }
            for _ in 0..r.random_range(0..=3) {
                counter += 1;
                let code = match system {
                    CodeSystemId::Ops => format!("{}x{counter}", &parent[..1]),
                    _ => format!("c{counter}"),
                };
                nodes.push(CodeNode::new(system, &code, level + 1, Some(&parent)));
                frontier.push((code, level + 1));
            }
        }
    }
    let tax = Taxonomy::from_nodes(nodes).expect("generated taxonomy is valid");
    let persons = (0..r.random_range(1..=30))
        .map(|_| {
            (0..r.random_range(0..=6))
                .map(|_| {
                    let n = tax.node(r.random_range(0..tax.len()));
                    (n.system, n.code.clone())
                })
                .collect()
        })
        .collect();
    (tax, persons)
}

fn c4_hierarchy() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 300,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&any::<u64>(), |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (tax, persons) = random_taxonomy(&mut r);
        for pos in 0..tax.len() {
            let n = tax.node(pos);
            let chain = tax.ancestors(n.system, &n.code).unwrap();
            prop_assert_eq!(chain.len(), (n.level - n.system.root_level() + 1) as usize);
            prop_assert_eq!(&chain.last().unwrap().code, &n.code);
        }
        let mut records = Vec::new();
        for (i, codes) in persons.iter().enumerate() {
            let once = expand_codes(&tax, codes).unwrap();
            let again: Vec<_> = once.iter().cloned().collect();
            prop_assert_eq!(&expand_codes(&tax, &again).unwrap(), &once);
            let mut p = PersonRecord::new(format!("p{i}"));
            p.codes = codes.clone();
            p.categorical
                .insert("g".into(), if i % 2 == 0 { "a".into() } else { "b".into() });
            records.push(p);
        }
        let cohort = Cohort::new(records).unwrap();
        let config = FeatureConfig {
            include_incidence: false,
            ..FeatureConfig::default()
        };
        let (space, design) = build_design(&cohort, &tax, &config).unwrap();
        let rows = |j: usize| -> BTreeSet<u32> {
            match design.column(j) {
                DesignColumn::Binary(v) => v.iter().copied().collect(),
                DesignColumn::Dense(_) => unreachable!("no dense columns requested"),
            }
        };
        for pos in 0..tax.len() {
            let n = tax.node(pos);
            let Some(j) = space.position(&code_column_name(n.system, &n.code)) else {
                continue;
            };
            if let Some(pp) = tax.parent_position(pos) {
                let parent = tax.node(pp);
                let pj = space.position(&code_column_name(parent.system, &parent.code));
                prop_assert!(pj.is_some(), "parent of an active column is missing");
                prop_assert!(rows(j).is_subset(&rows(pj.unwrap())));
            }
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("300 random taxonomies: chain lengths, child rows within parent rows, idempotent expansion".into())
}

fn c5_metrics() -> Verdict {
    let mut r = common::rng(505);
    let mut done = 0;
    let mut worst_roc: f64 = 0.0;
    let mut worst_adj: f64 = 0.0;
    while done < 1000 {
        let n = r.random_range(2..=200);
        let levels = r.random_range(2..=n.max(2) as i64 * 2);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / 7.0 - 3.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_bool(0.3) as u8).collect();
        if labels.iter().all(|&v| v == labels[0]) {
            continue;
        }
        let a = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let brute = common::pair_auc(&scores, &labels);
        ensure!((a - brute).abs() <= 1e-12, "auc {a} vs pair count {brute}");
        let area = roc_area(&roc_curve(&scores, &labels).map_err(|e| e.to_string())?);
        worst_roc = worst_roc.max((area - a).abs());
        ensure!((area - a).abs() <= 1e-12, "roc area {area} vs auc {a}");
        let target = r.random_range(0.01..0.99);
        let (adj, _) = prevalence_adjust(&scores, target).map_err(|e| e.to_string())?;
        let mean = adj.iter().map(|&l| sigmoid(l)).sum::<f64>() / n as f64;
        worst_adj = worst_adj.max((mean - target).abs());
        ensure!((mean - target).abs() <= 1e-8, "adjusted mean {mean} vs target {target}");
        let a2 = auc(&adj, &labels).map_err(|e| e.to_string())?;
        ensure!(a2 == a, "adjustment changed auc {a} -> {a2}");
        let prior = labels.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
        let flat =
            expected_weight_of_evidence(&vec![prior; n], &labels, prior, WoeUnit::Nats).map_err(|e| e.to_string())?;
        ensure!(flat.abs() <= 1e-12, "weight of evidence at the prior is {flat}");
        done += 1;
    }
    let two = expected_weight_of_evidence(&[0.9, 0.1], &[1, 0], 0.5, WoeUnit::Nats).map_err(|e| e.to_string())?;
    ensure!(
        (two - 9f64.ln()).abs() <= 1e-12,
        "two-row weight of evidence {two}, expected ln 9"
    );
    Ok(format!(
        "1000 instances; max |roc area - auc| {worst_roc:.1e}, max adjusted-mean error {worst_adj:.1e}; two-row case = ln 9"
    ))
}

fn auc_or(scores: &[f64], labels: &[u8]) -> Result<f64, String> {
    auc(scores, labels).map_err(|e| e.to_string())
}

fn c6_planted() -> Verdict {
    let mut spec = GeneratorSpec::preset(100_000, 61);
    spec.categorical[1].weights = vec![0.52, 0.48];
    let tax = generate_taxonomy(&spec).map_err(|e| e.to_string())?;
    let pick = |s, l, i: usize| codes_at_level(&tax, s, l)[i].clone();
    use CodeSystemId::*;
    let planted = [
        (pick(Icd, 2, 1), -0.7),
        (pick(Icd, 3, 5), 0.8),
        (pick(Icd, 4, 10), 1.0),
        (pick(Icd, 5, 40), 1.3),
        (pick(Icd, 5, 77), 0.3),
        (pick(Atc, 2, 2), 0.6),
        (pick(Atc, 4, 7), 0.9),
        (pick(Ops, 3, 4), 0.7),
        ("age_group=85-89".to_string(), 0.8),
        ("gender=M".to_string(), 0.25),
    ];
    spec.planted = planted.iter().cloned().collect();
    spec.intercept = -5.05;
    let s = generate_cohort(&tax, &spec).map_err(|e| e.to_string())?;
    let y = s.cohort.labels(Outcome::Y2);
    let prevalence = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
    ensure!((0.005..0.02).contains(&prevalence), "prevalence {prevalence}");
    let start = Instant::now();
    let run = run_cv(
        &s.cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y2,
        &LambdaGrid::default(),
        &CvSettings {
            seed: 5,
            ..CvSettings::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let fit_time = start.elapsed();
    let bayes = auc_or(&s.true_logit, &y)?;
    let oof = auc_or(&run.cv.oof_logit, &y)?;
    ensure!((bayes - oof).abs() <= 0.02, "oof auc {oof:.4} vs bayes {bayes:.4}");
    let mut checked = 0;
    for (name, c) in &planted {
        if c.abs() < 0.5 {
            continue;
        }
        let j = run
            .space
            .position(name)
            .ok_or(format!("{name} not in the feature space"))?;
        let b = run.full.coefficient(j);
        ensure!(b.signum() == c.signum() && b != 0.0, "{name}: planted {c}, fitted {b}");
        checked += 1;
    }
    check_kkt(
        &run.design,
        &run.y,
        &run.space.penalty_factors(),
        &run.full,
        "full refit",
    )?;
    ensure!(fit_time < Duration::from_secs(300), "cv took {fit_time:?}");
    Ok(format!(
        "prevalence {:.2}%, oof auc {oof:.4} vs bayes {bayes:.4}, {checked} planted signs recovered, cv {:.0}s",
        100.0 * prevalence,
        fit_time.as_secs_f64()
    ))
}

fn c7_ordering() -> Verdict {
    let mut spec = GeneratorSpec::preset(50_000, 71);
    let tax = generate_taxonomy(&spec).map_err(|e| e.to_string())?;
    let pick = |s, l, i: usize| codes_at_level(&tax, s, l)[i].clone();
    use CodeSystemId::*;
    spec.planted = [
        (pick(Icd, 4, 3), 1.2),
        (pick(Icd, 5, 20), 1.5),
        (pick(Icd, 4, 30), -0.9),
        (pick(Icd, 5, 100), 1.3),
        (pick(Atc, 4, 5), 1.0),
        (pick(Atc, 5, 30), 1.4),
        (pick(Ops, 5, 7), 1.2),
        ("age_group=75-79".to_string(), 0.6),
        ("age_group=80-84".to_string(), 0.8),
    ]
    .into_iter()
    .collect();
    spec.intercept = -4.2;
    let s = generate_cohort(&tax, &spec).map_err(|e| e.to_string())?;
    let wave = generate_cohort(
        &tax,
        &GeneratorSpec {
            seed: 72,
            ..spec.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    let full = FeatureConfig {
        name: Some("full".into()),
        ..FeatureConfig::default()
    };
    let groups = FeatureConfig {
        name: Some("level2".into()),
        levels: Some(vec![2]),
        include_incidence: false,
        ..FeatureConfig::default()
    };
    let mut demo = FeatureConfig::categorical_only(&["age_group", "gender"]);
    demo.name = Some("age-gender".into());
    let result = benchmark(
        &s.cohort,
        &tax,
        &[full, groups, demo],
        &[],
        &[Outcome::Y2],
        &LambdaGrid::default(),
        &CvSettings {
            seed: 3,
            ..CvSettings::default()
        },
        Some(&wave.cohort),
        WoeUnit::Nats,
    )
    .map_err(|e| e.to_string())?;
    let ll = |model: &str, setup: &str| -> Result<f64, String> {
        result
            .rows
            .iter()
            .find(|r: &&BenchmarkRow| r.model == model && r.setup == setup)
            .map(|r| r.log_lik)
            .ok_or(format!("missing row {model}/{setup}"))
    };
    let mut detail = Vec::new();
    for setup in ["cv", "holdout"] {
        let (a, b, c) = (ll("full", setup)?, ll("level2", setup)?, ll("age-gender", setup)?);
        ensure!(a > b && b > c, "{setup}: full {a:.2}, level2 {b:.2}, age-gender {c:.2}");
        detail.push(format!("{setup} {a:.1} > {b:.1} > {c:.1}"));
    }
    Ok(format!("logLik {}", detail.join("; ")))
}

fn toy_problem(seed: u64, n: usize, p: usize) -> (SparseDesignMatrix, Vec<u8>, Vec<f64>) {
    let mut r = common::rng(seed);
    let (x, y) = common::random_instance(&mut r, n, p, false);
    let pf: Vec<f64> = (0..p).map(|j| (1 + j % 3) as f64).collect();
    (common::to_design(&x, false), y, pf)
}

fn c8_leakage() -> Verdict {
    let (design, y, pf) = toy_problem(808, 120, 8);
    let lmax = lambda_max(&design, &y, &pf).map_err(|e| e.to_string())?;
    let grid = lambda_grid(lmax, 12, 1e-2);
    let folds = make_folds(&y, 4, 8).map_err(|e| e.to_string())?;
    let opts = FitOptions::default();
    let base = cv_select_lambda(&design, &y, &pf, &grid, &folds, &opts).map_err(|e| e.to_string())?;
    let target = 2;
    let rows = folds.rows(target);
    let mut permuted = y.clone();
    let mut r = common::rng(9);
    let mut labels: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
    // Rotate so at least one label moves, then shuffle.
    labels.rotate_left(1);
    for i in (1..labels.len()).rev() {
        labels.swap(i, r.random_range(0..=i));
    }
    for (&i, &l) in rows.iter().zip(&labels) {
        permuted[i] = l;
    }
    ensure!(permuted != y, "permutation left outcomes unchanged");
    let other = cv_select_lambda(&design, &permuted, &pf, &grid, &folds, &opts).map_err(|e| e.to_string())?;
    let same = |a: &CvResult, b: &CvResult| {
        a.fold_scores[target]
            .iter()
            .zip(&b.fold_scores[target])
            .all(|(u, v)| u.iter().zip(v).all(|(s, t)| s.to_bits() == t.to_bits()))
    };
    ensure!(same(&base, &other), "held-out scores of fold {target} changed");
    Ok(format!(
        "{} rows of fold {target}, {} lambdas: scores bitwise identical",
        rows.len(),
        grid.len()
    ))
}

fn c9_cancellation() -> Verdict {
    let mut spec = GeneratorSpec::preset(3_000, 9);
    spec.intercept = -2.5;
    let tax = generate_taxonomy(&spec).map_err(|e| e.to_string())?;
    spec.planted = [
        (codes_at_level(&tax, CodeSystemId::Icd, 2)[3].clone(), 0.9),
        ("age_group=70-74".to_string(), 0.7),
        ("gender=M".to_string(), 0.5),
    ]
    .into_iter()
    .collect();
    let s = generate_cohort(&tax, &spec).map_err(|e| e.to_string())?;
    let grid = LambdaGrid::Geometric {
        count: 15,
        min_ratio: 1e-2,
    };
    let run = run_cv(
        &s.cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y1,
        &grid,
        &CvSettings::default(),
    )
    .map_err(|e| e.to_string())?;
    let a = feature_dummies(&run.space, &["age_group"]);
    let b = feature_dummies(&run.space, &["gender"]);
    let union: Vec<String> = a.iter().chain(&b).cloned().collect();
    let empty = build_risk_index(&run.cv, &run.design, &run.space, &[]).map_err(|e| e.to_string())?;
    let both = build_risk_index(&run.cv, &run.design, &run.space, &union).map_err(|e| e.to_string())?;
    let models: Vec<LassoFit> = (0..run.cv.folds.k).map(|f| run.cv.fold_model(f).clone()).collect();
    let ca =
        cancellation_contribution(&models, &run.cv.folds, &run.design, &run.space, &a).map_err(|e| e.to_string())?;
    let cb =
        cancellation_contribution(&models, &run.cv.folds, &run.design, &run.space, &b).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..empty.scores.len() {
        worst = worst.max((both.scores[i] - (empty.scores[i] - ca[i] - cb[i])).abs());
    }
    ensure!(worst <= 1e-10, "max deviation {worst:e}");
    let moved = ca.iter().chain(&cb).filter(|v| **v != 0.0).count();
    ensure!(moved > 0, "cancelled columns carry no weight; the check is vacuous");
    Ok(format!("{} rows, max deviation {worst:.1e}", empty.scores.len()))
}

fn c10_profile() -> Verdict {
    let mut spec = GeneratorSpec::preset(30_000, 101);
    spec.age_correlation = 0.6;
    let tax = generate_taxonomy(&spec).map_err(|e| e.to_string())?;
    let pick = |s, l, i: usize| codes_at_level(&tax, s, l)[i].clone();
    use CodeSystemId::*;
    spec.planted = [
        (pick(Icd, 2, 2), 0.8),
        (pick(Icd, 3, 20), 1.0),
        (pick(Atc, 2, 3), 0.7),
        (pick(Atc, 1, 1), 0.5),
        (pick(Ops, 3, 2), 0.9),
        ("age_group=85-89".to_string(), 0.3),
        ("age_group=90+".to_string(), 0.3),
    ]
    .into_iter()
    .collect();
    spec.intercept = -4.6;
    let s = generate_cohort(&tax, &spec).map_err(|e| e.to_string())?;
    let run = run_cv(
        &s.cohort,
        &tax,
        &FeatureConfig::default(),
        Outcome::Y2,
        &LambdaGrid::default(),
        &CvSettings {
            seed: 1,
            ..CvSettings::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let cancel = feature_dummies(&run.space, &["age_group", "gender"]);
    let index = build_risk_index(&run.cv, &run.design, &run.space, &cancel).map_err(|e| e.to_string())?;
    let data =
        ProfileData::from_cohort(&s.cohort, &index, "age_group", "gender", Outcome::Y2).map_err(|e| e.to_string())?;
    let pairs = fit_conditional_profile(&data, None).map_err(|e| e.to_string())?;
    ensure!(pairs.len() == 2, "expected two genders, got {}", pairs.len());
    let mut detail = Vec::new();
    for p in &pairs {
        let (lo, hi) = p.age_range;
        let (c, u) = (p.conditional.rise(lo, hi), p.unconditional.rise(lo, hi));
        ensure!(
            c < u,
            "{}: conditional rise {c:.4} not below unconditional {u:.4}",
            p.gender
        );
        detail.push(format!("{} {c:.3} < {u:.3}", p.gender));
    }
    Ok(format!("logit rise conditional < unconditional: {}", detail.join(", ")))
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn c11_performance() -> Verdict {
    let (n, p) = (100_000usize, 10_000usize);
    let mut r = common::rng(1111);
    let mut cols: Vec<Vec<u32>> = vec![Vec::new(); p];
    let mut eta = vec![-4.6f64; n];
    let truth: Vec<f64> = (0..p).map(|j| if j % 500 == 0 { 0.7 } else { 0.0 }).collect();
    for (i, e) in eta.iter_mut().enumerate() {
        for _ in 0..30 {
            let j = r.random_range(0..p);
            if cols[j].last() != Some(&(i as u32)) {
                cols[j].push(i as u32);
                *e += truth[j];
            }
        }
    }
    let y: Vec<u8> = eta.iter().map(|&e| (r.random::<f64>() < sigmoid(e)) as u8).collect();
    let design =
        SparseDesignMatrix::new(n, cols.into_iter().map(DesignColumn::Binary).collect()).map_err(|e| e.to_string())?;
    let pf: Vec<f64> = (0..p).map(|j| (1 + j % 5) as f64).collect();
    let nnz_per_row = design.binary_nnz() as f64 / n as f64;

    let cv_fit = |threads: usize| -> Result<(CvResult, LassoFit, Duration), String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| {
            let start = Instant::now();
            let lambdas = LambdaGrid::default()
                .resolve(&design, &y, &pf)
                .map_err(|e| e.to_string())?;
            let folds = make_folds(&y, 5, 11).map_err(|e| e.to_string())?;
            let opts = FitOptions::default();
            let cv = cv_select_lambda(&design, &y, &pf, &lambdas, &folds, &opts).map_err(|e| e.to_string())?;
            let full = refit_full(&design, &y, &pf, &cv, &opts).map_err(|e| e.to_string())?;
            Ok((cv, full, start.elapsed()))
        })
    };
    let (cv_a, full_a, t_a) = cv_fit(8)?;
    let peak = peak_rss_bytes();
    ensure!(t_a < Duration::from_secs(600), "cv-fit took {t_a:?}");
    if let Some(b) = peak {
        ensure!(b < 4 << 30, "peak resident memory {b} bytes");
    }
    let (cv_b, full_b, t_b) = cv_fit(1)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(
        cv_a.selected_index == cv_b.selected_index,
        "selected lambda differs across thread counts"
    );
    ensure!(
        bits(&cv_a.oof_logit) == bits(&cv_b.oof_logit),
        "oof scores differ across thread counts"
    );
    ensure!(
        bits(&cv_a.mean_auc) == bits(&cv_b.mean_auc),
        "cv auc differs across thread counts"
    );
    ensure!(full_a == full_b, "full refit differs across thread counts");
    Ok(format!(
        "{n}x{p}, {nnz_per_row:.1} nnz/row, 5 folds x {} lambdas: {:.0}s with 8 threads, peak RSS {}, {:.0}s with 1 thread, bitwise identical; available cores {}",
        cv_a.lambdas.len(),
        t_a.as_secs_f64(),
        peak.map_or("unknown".into(), |b| format!("{:.2} GiB", b as f64 / (1u64 << 30) as f64)),
        t_b.as_secs_f64(),
        std::thread::available_parallelism().map_or(0, |n| n.get())
    ))
}
