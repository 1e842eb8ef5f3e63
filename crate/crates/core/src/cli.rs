//! Command-line front end. Every command writes its outputs and a run
//! manifest into `--out-dir`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::aggregate::{
    export_coefficients, population_importance, write_effects_csv, write_groups_csv, EffectContext,
};
use crate::cohort::{impute_reference_incidence, Cohort, IncidenceSeries, Outcome};
use crate::error::{Error, Result};
use crate::featurize::{build_design, build_design_for_space, column_prevalence, write_design_cache, FeatureConfig};
use crate::manifest::{load_json, save_json, RunManifest};
use crate::metrics::{prevalence_adjust, roc_area, roc_curve, write_roc_csv, EvaluationReport, WoeUnit};
use crate::pipeline::{
    benchmark, fit_at_lambda, holdout_eval, run_cv, write_benchmark_csv, CvArtifact, CvSettings, ExternalPredictions,
    LambdaGrid, ModelArtifact,
};
use crate::riskindex::{
    feature_dummies, fit_conditional_profile, risk_index_from_models, score_distribution, uniform_edges,
    write_histogram_csv, write_profile_csv, ProfileData, ProfilePair, RiskIndex,
};
use crate::solver::{sigmoid, FitOptions};
use crate::synth::{generate_cohort, generate_taxonomy, GeneratorSpec};
use crate::taxonomy::Taxonomy;

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "claimrisk",
    version,
    about = "Hierarchical claims features, penalized logistic models and risk indices"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Code taxonomy (TSV).
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    /// Cohort (JSONL).
    #[arg(long, global = true)]
    pub cohort: Option<PathBuf>,
    #[arg(long, global = true, default_value = "y2")]
    pub outcome: Outcome,
    /// Feature config (JSON); the default uses every feature.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 5)]
    pub folds: usize,
    /// `count[:min_ratio]` or `list:v1,v2,...`.
    #[arg(long, global = true, default_value = "50:1e-4")]
    pub lambda_grid: LambdaGrid,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Regional incidence series (CSV) used to fill missing incidence values.
    #[arg(long, global = true)]
    pub incidence: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a taxonomy file and summarize codes per level.
    ValidateTaxonomy,
    /// Generate a synthetic taxonomy, cohort and true-logit sidecar.
    Simulate(SimulateArgs),
    /// Expand codes and write the binary design cache and feature space.
    Featurize,
    /// Select lambda by K-fold CV and refit on all rows.
    CvFit,
    /// Fit on all rows at a fixed lambda.
    Fit(FitArgs),
    /// Score a cohort with a saved model.
    Predict(ModelArg),
    /// Evaluate predictions against cohort outcomes.
    Metrics(MetricsArgs),
    /// Total code effects, group odds ratios and importance ranking.
    Aggregate(AggregateArgs),
    /// Cross-fitted risk index with optional coefficient cancellation.
    RiskIndex(RiskIndexArgs),
    /// Age profiles with and without conditioning on a risk index.
    Profile(ProfileArgs),
    /// Compare feature configs and external predictions.
    Benchmark(BenchmarkArgs),
    /// Evaluate a frozen model on a new cohort.
    HoldoutEval(HoldoutArgs),
    /// Plot-ready CSVs from earlier artifacts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generator spec (JSON); the built-in preset with default planted effects when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Persons for the preset.
    #[arg(long, default_value_t = 10_000)]
    pub n_persons: usize,
    /// Use the preset with a very rare outcome.
    #[arg(long)]
    pub rare: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// `model.json` written by cv-fit or fit.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// `id,logit` CSV (extra columns are ignored).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Prior for the weight of evidence; the outcome prevalence by default.
    #[arg(long)]
    pub prior: Option<f64>,
    /// Shift logits to the outcome prevalence first.
    #[arg(long)]
    pub adjust: bool,
    /// Report the weight of evidence in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub min_group_size: usize,
}

#[derive(Debug, Args)]
pub struct RiskIndexArgs {
    /// `cv_model.json` written by cv-fit.
    #[arg(long)]
    pub cv_model: PathBuf,
    /// Column names to zero before scoring.
    #[arg(long, value_delimiter = ',')]
    pub cancel: Vec<String>,
    /// Categorical features whose dummies are zeroed.
    #[arg(long, value_delimiter = ',')]
    pub cancel_feature: Vec<String>,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// `index.csv` written by risk-index.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value = "age_group")]
    pub age_feature: String,
    #[arg(long, default_value = "gender")]
    pub gender_feature: String,
    /// Knot ages; quantiles per gender when omitted.
    #[arg(long, value_delimiter = ',')]
    pub knots: Vec<f64>,
    /// Extra categorical covariates, reference = most frequent level.
    #[arg(long, value_delimiter = ',')]
    pub condition_on: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub grid_step: f64,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Feature configs to compare, in addition to `--config`.
    #[arg(long = "configs", value_delimiter = ',')]
    pub configs: Vec<PathBuf>,
    /// External predictions as `[outcome:]path` (`id,logit` CSV).
    #[arg(long)]
    pub external: Vec<String>,
    /// Outcomes to benchmark; `--outcome` when omitted.
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Vec<Outcome>,
    /// Later-wave cohort for frozen-model evaluation.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Ids to drop from the holdout cohort, one per line.
    #[arg(long)]
    pub exclude_ids: Option<PathBuf>,
    #[arg(long)]
    pub bits: bool,
}

#[derive(Debug, Args)]
pub struct HoldoutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Ids to drop before scoring, one per line.
    #[arg(long)]
    pub exclude_ids: Option<PathBuf>,
    #[arg(long)]
    pub bits: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// ROC input as `name=path` (`id,logit` CSV); labels come from the cohort.
    #[arg(long)]
    pub roc: Vec<String>,
    /// Two `label=effects.csv` inputs for the log odds ratio scatter.
    #[arg(long)]
    pub effects: Vec<String>,
    /// `index.csv` for score histograms.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// `profile.json` to tabulate.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    #[arg(long, default_value_t = 1.0)]
    pub grid_step: f64,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    causes: Vec<String>,
}

/// Parses arguments, runs the command and maps failures to a JSON error on stderr.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = ErrorReport {
                error: "usage",
                message: e.to_string().trim().to_string(),
                causes: Vec::new(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut causes = Vec::new();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                causes.push(s.to_string());
                src = s.source();
            }
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
                causes,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    std::fs::create_dir_all(&g.out_dir).map_err(|e| Error::io(&g.out_dir, e))?;
    let name = command_name(&cli.command);
    let mut m = RunManifest::new(name);
    m.seed = Some(g.seed);
    m.arg("outcome", g.outcome);
    m.arg("folds", g.folds);
    m.arg("lambda_grid", format!("{:?}", g.lambda_grid));
    m.arg("threads", g.threads.map_or("all".into(), |t| t.to_string()));
    m.arg("command", format!("{:?}", cli.command));
    if let Some(c) = &g.config {
        m.set_config(c)?;
    }
    match &cli.command {
        Command::ValidateTaxonomy => validate_taxonomy(g, &mut m)?,
        Command::Simulate(a) => simulate(g, a, &mut m)?,
        Command::Featurize => featurize(g, &mut m)?,
        Command::CvFit => cv_fit(g, &mut m)?,
        Command::Fit(a) => fit(g, a, &mut m)?,
        Command::Predict(a) => predict(g, a, &mut m)?,
        Command::Metrics(a) => metrics(g, a, &mut m)?,
        Command::Aggregate(a) => aggregate(g, a, &mut m)?,
        Command::RiskIndex(a) => risk_index(g, a, &mut m)?,
        Command::Profile(a) => profile(g, a, &mut m)?,
        Command::Benchmark(a) => run_benchmark(g, a, &mut m)?,
        Command::HoldoutEval(a) => holdout(g, a, &mut m)?,
        Command::Report(a) => report(g, a, &mut m)?,
    }
    let path = m.save(&g.out_dir)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::ValidateTaxonomy => "validate-taxonomy",
        Command::Simulate(_) => "simulate",
        Command::Featurize => "featurize",
        Command::CvFit => "cv-fit",
        Command::Fit(_) => "fit",
        Command::Predict(_) => "predict",
        Command::Metrics(_) => "metrics",
        Command::Aggregate(_) => "aggregate",
        Command::RiskIndex(_) => "risk-index",
        Command::Profile(_) => "profile",
        Command::Benchmark(_) => "benchmark",
        Command::HoldoutEval(_) => "holdout-eval",
        Command::Report(_) => "report",
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidInput(format!("--{flag} is required for this command")))
}

fn load_taxonomy(g: &GlobalArgs, m: &mut RunManifest) -> Result<Taxonomy> {
    let path = required(&g.taxonomy, "taxonomy")?;
    m.add_input(path)?;
    m.time("load_taxonomy", || Taxonomy::load(path))
}

fn load_cohort_at(g: &GlobalArgs, path: &Path, m: &mut RunManifest) -> Result<Cohort> {
    m.add_input(path)?;
    let cohort = m.time("load_cohort", || Cohort::load(path, &BTreeMap::new()))?;
    match &g.incidence {
        Some(p) => {
            m.add_input(p)?;
            let series = IncidenceSeries::load(p)?;
            impute_reference_incidence(&cohort, &series, g.outcome, g.seed)
        }
        None => Ok(cohort),
    }
}

fn load_cohort(g: &GlobalArgs, m: &mut RunManifest) -> Result<Cohort> {
    let path = required(&g.cohort, "cohort")?.to_path_buf();
    load_cohort_at(g, &path, m)
}

fn load_config(g: &GlobalArgs) -> Result<FeatureConfig> {
    match &g.config {
        Some(p) => FeatureConfig::load(p),
        None => Ok(FeatureConfig::default()),
    }
}

fn load_model(path: &Path, m: &mut RunManifest) -> Result<ModelArtifact> {
    m.add_input(path)?;
    load_json(path)
}

fn out(g: &GlobalArgs, m: &mut RunManifest, file: &str) -> PathBuf {
    let p = g.out_dir.join(file);
    m.output(&p);
    p
}

fn settings(g: &GlobalArgs) -> CvSettings {
    CvSettings {
        folds: g.folds,
        seed: g.seed,
        options: FitOptions::default(),
    }
}

fn unit(bits: bool) -> WoeUnit {
    if bits {
        WoeUnit::Bits
    } else {
        WoeUnit::Nats
    }
}

fn validate_taxonomy(g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    #[derive(Serialize)]
    struct Summary {
        codes: usize,
        levels: Vec<(String, u8, usize)>,
        unknown_cohort_codes: Option<usize>,
    }
    let unknown = match &g.cohort {
        Some(_) => {
            let cohort = load_cohort(g, m)?;
            Some(
                cohort
                    .records()
                    .iter()
                    .flat_map(|r| &r.codes)
                    .filter(|(s, c)| tax.position(*s, c).is_none())
                    .count(),
            )
        }
        None => None,
    };
    let summary = Summary {
        codes: tax.len(),
        levels: tax
            .level_counts()
            .rows()
            .into_iter()
            .map(|(s, l, n)| (s.to_string(), l, n))
            .collect(),
        unknown_cohort_codes: unknown,
    };
    for (s, l, n) in &summary.levels {
        say!("{s}\tlevel {l}\t{n}");
    }
    save_json(&summary, &out(g, m, "taxonomy_summary.json"))
}

fn simulate(g: &GlobalArgs, a: &SimulateArgs, m: &mut RunManifest) -> Result<()> {
    let (spec, tax) = match &a.spec {
        Some(p) => {
            m.add_input(p)?;
            let mut s = GeneratorSpec::load(p)?;
            s.seed = g.seed;
            let tax = generate_taxonomy(&s)?;
            (s, tax)
        }
        None => {
            let mut s = if a.rare {
                GeneratorSpec::rare_outcome(a.n_persons, g.seed)
            } else {
                GeneratorSpec::preset(a.n_persons, g.seed)
            };
            let tax = generate_taxonomy(&s)?;
            s.plant_default_effects(&tax);
            (s, tax)
        }
    };
    let synth = m.time("generate", || generate_cohort(&tax, &spec))?;
    tax.save(out(g, m, "taxonomy.tsv"))?;
    synth.cohort.save(out(g, m, "cohort.jsonl"))?;
    synth.write_sidecar(&out(g, m, "truth.csv"))?;
    save_json(&spec, &out(g, m, "generator_spec.json"))?;
    log::info!("simulated {} persons over {} codes", synth.cohort.len(), tax.len());
    Ok(())
}

fn featurize(g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let config = load_config(g)?;
    let (space, design) = m.time("featurize", || build_design(&cohort, &tax, &config))?;
    let cache = out(g, m, "design.bin");
    let f = std::fs::File::create(&cache).map_err(|e| Error::io(&cache, e))?;
    let mut w = BufWriter::new(f);
    write_design_cache(&mut w, &space, &design)
        .and_then(|()| w.flush())
        .map_err(|e| Error::io(&cache, e))?;
    save_json(&space, &out(g, m, "feature_space.json"))?;
    #[derive(Serialize)]
    struct Summary {
        n_rows: usize,
        n_cols: usize,
        binary_nnz: usize,
        unused_columns: usize,
    }
    let summary = Summary {
        n_rows: design.n_rows(),
        n_cols: design.n_cols(),
        binary_nnz: design.binary_nnz(),
        unused_columns: column_prevalence(&design).iter().filter(|&&c| c == 0).count(),
    };
    save_json(&summary, &out(g, m, "featurize_summary.json"))
}

fn cv_fit(g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let config = load_config(g)?;
    let run = m.time("cv_fit", || {
        run_cv(&cohort, &tax, &config, g.outcome, &g.lambda_grid, &settings(g))
    })?;
    m.selected_lambda = Some(run.cv.selected_lambda);
    run.cv.write_report(&out(g, m, "cv_report.csv"))?;
    save_json(&run.model(), &out(g, m, "model.json"))?;
    save_json(&run.artifact(&cohort), &out(g, m, "cv_model.json"))?;
    let path = out(g, m, "oof.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "fold", "y", "logit"])?;
    for (i, id) in cohort.ids().enumerate() {
        w.write_record([
            id.to_string(),
            run.cv.folds.fold_of[i].to_string(),
            run.y[i].to_string(),
            run.cv.oof_logit[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    log::info!(
        "selected lambda {:e} (index {}), mean cv auc {:.4}, {} nonzero",
        run.cv.selected_lambda,
        run.cv.selected_index,
        run.cv.mean_auc[run.cv.selected_index],
        run.full.n_nonzero
    );
    Ok(())
}

fn fit(g: &GlobalArgs, a: &FitArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let config = load_config(g)?;
    let model = m.time("fit", || {
        fit_at_lambda(
            &cohort,
            &tax,
            &config,
            g.outcome,
            &g.lambda_grid,
            a.lambda,
            &FitOptions::default(),
        )
    })?;
    m.selected_lambda = Some(a.lambda);
    save_json(&model, &out(g, m, "model.json"))
}

fn predict(g: &GlobalArgs, a: &ModelArg, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let model = load_model(&a.model, m)?;
    m.selected_lambda = Some(model.selected_lambda);
    let (logits, align) = m.time("predict", || model.score(&cohort, &tax))?;
    if align.unknown_codes + align.codes_outside_space + align.missing_features > 0 {
        log::warn!("alignment: {align:?}");
    }
    let path = out(g, m, "predictions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "logit", "prob"])?;
    for (id, l) in cohort.ids().zip(&logits) {
        w.write_record([id.to_string(), l.to_string(), sigmoid(*l).to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads `id,logit` predictions, ignoring other columns.
pub fn read_predictions(path: &Path) -> Result<HashMap<String, f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(&path.display().to_string(), 1, format!("missing column {name:?}")))
    };
    let (id_col, logit_col) = (col("id")?, col("logit")?);
    let mut outmap = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |msg: String| Error::parse(&path.display().to_string(), line, msg);
        let id = rec.get(id_col).ok_or_else(|| bad("missing id".into()))?;
        let logit: f64 = rec
            .get(logit_col)
            .ok_or_else(|| bad("missing logit".into()))?
            .parse()
            .map_err(|e| bad(format!("bad logit: {e}")))?;
        if outmap.insert(id.to_string(), logit).is_some() {
            return Err(bad(format!("duplicate id {id}")));
        }
    }
    Ok(outmap)
}

/// Values for every cohort id, in cohort order.
fn align_to_cohort(values: &HashMap<String, f64>, cohort: &Cohort, what: &str) -> Result<Vec<f64>> {
    cohort
        .ids()
        .map(|id| {
            values
                .get(id)
                .copied()
                .ok_or_else(|| Error::Dimension(format!("{what} has no entry for id {id}")))
        })
        .collect()
}

fn metrics(g: &GlobalArgs, a: &MetricsArgs, m: &mut RunManifest) -> Result<()> {
    let cohort = load_cohort(g, m)?;
    m.add_input(&a.predictions)?;
    let preds = read_predictions(&a.predictions)?;
    let mut logits = align_to_cohort(&preds, &cohort, "predictions")?;
    let labels = cohort.labels(g.outcome);
    if a.adjust {
        let prevalence = labels.iter().filter(|&&v| v == 1).count() as f64 / labels.len().max(1) as f64;
        logits = prevalence_adjust(&logits, prevalence)?.0;
    }
    let report = EvaluationReport::from_logits(&logits, &labels, a.prior, unit(a.bits))?;
    report.save(&out(g, m, "metrics.json"))?;
    write_roc_csv(&roc_curve(&logits, &labels)?, &out(g, m, "roc.csv"))?;
    say!(
        "auc {:.6} lambda {:.6} loglik {:.4}",
        report.auc,
        report.lambda_woe,
        report.log_lik
    );
    Ok(())
}

fn aggregate(g: &GlobalArgs, a: &AggregateArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let model = load_model(&a.model, m)?;
    m.selected_lambda = Some(model.selected_lambda);
    let (design, _) = build_design_for_space(&cohort, &tax, &model.space)?;
    let ctx = EffectContext::new(&model.fit, &model.space, &tax, &design)?;
    let (rows, meta) = export_coefficients(&ctx, a.min_group_size)?;
    let groups = population_importance(ctx.all_groups(&model.config.systems)?);
    write_effects_csv(&rows, &out(g, m, "effects.csv"))?;
    write_groups_csv(&groups, &out(g, m, "groups.csv"))?;
    save_json(&meta, &out(g, m, "aggregate_meta.json"))
}

fn risk_index(g: &GlobalArgs, a: &RiskIndexArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    m.add_input(&a.cv_model)?;
    let art: CvArtifact = load_json(&a.cv_model)?;
    m.selected_lambda = Some(art.lambdas[art.selected_index]);
    let ids: Vec<&str> = cohort.ids().collect();
    if ids.len() != art.ids.len() || ids.iter().zip(&art.ids).any(|(a, b)| a != b) {
        return Err(Error::Dimension(
            "cohort ids differ from the cross-validated cohort".into(),
        ));
    }
    let (design, _) = build_design_for_space(&cohort, &tax, &art.space)?;
    let features: Vec<&str> = a.cancel_feature.iter().map(String::as_str).collect();
    let mut cancel = a.cancel.clone();
    cancel.extend(feature_dummies(&art.space, &features));
    let index = m.time("index", || {
        risk_index_from_models(&art.fold_models, &art.folds, &design, &art.space, &cancel)
    })?;
    index.write_csv(cohort.ids(), &out(g, m, "index.csv"))?;
    let labels: Vec<String> = cohort.labels(art.outcome).iter().map(|v| v.to_string()).collect();
    let hist = score_distribution(&index.scores, &labels, &score_edges(&index.scores, a.bins)?)?;
    write_histogram_csv(&hist, &out(g, m, "index_histogram.csv"))
}

fn score_edges(scores: &[f64], bins: usize) -> Result<Vec<f64>> {
    if scores.is_empty() || bins == 0 {
        return Err(Error::InvalidInput(
            "histogram needs scores and at least one bin".into(),
        ));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    Ok(uniform_edges(lo, hi, bins))
}

/// Reads `index.csv` back into cohort order.
pub fn read_index(path: &Path, cohort: &Cohort) -> Result<RiskIndex> {
    let mut r = csv::Reader::from_path(path)?;
    let mut by_id = HashMap::new();
    for rec in r.deserialize() {
        let (id, fold, score): (String, usize, f64) = rec?;
        by_id.insert(id, (fold, score));
    }
    let mut index = RiskIndex {
        scores: Vec::with_capacity(cohort.len()),
        fold_of: Vec::with_capacity(cohort.len()),
        cancelled: Vec::new(),
        lambda: f64::NAN,
    };
    for id in cohort.ids() {
        let (f, s) = by_id
            .get(id)
            .ok_or_else(|| Error::Dimension(format!("index has no entry for id {id}")))?;
        index.fold_of.push(*f);
        index.scores.push(*s);
    }
    Ok(index)
}

fn most_frequent(cohort: &Cohort, feature: &str) -> Result<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in cohort.records() {
        if let Some(v) = r.categorical.get(feature) {
            *counts.entry(v).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(v, _)| v.to_string())
        .ok_or_else(|| Error::Config(format!("no person has a value for {feature:?}")))
}

fn profile(g: &GlobalArgs, a: &ProfileArgs, m: &mut RunManifest) -> Result<()> {
    let cohort = load_cohort(g, m)?;
    m.add_input(&a.index)?;
    let index = read_index(&a.index, &cohort)?;
    let mut data = ProfileData::from_cohort(&cohort, &index, &a.age_feature, &a.gender_feature, g.outcome)?;
    for f in &a.condition_on {
        data.add_dummies(&cohort, f, &most_frequent(&cohort, f)?)?;
    }
    let knots = (!a.knots.is_empty()).then_some(a.knots.as_slice());
    let pairs = m.time("profile", || fit_conditional_profile(&data, knots))?;
    for p in &pairs {
        let (lo, hi) = p.age_range;
        log::info!(
            "{}: rise conditional {:.4}, unconditional {:.4}",
            p.gender,
            p.conditional.rise(lo, hi),
            p.unconditional.rise(lo, hi)
        );
    }
    save_json(&pairs, &out(g, m, "profile.json"))?;
    write_profile_csv(&pairs, a.grid_step, &out(g, m, "profile.csv"))
}

fn read_ids(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "id")
        .map(str::to_string)
        .collect())
}

fn run_benchmark(g: &GlobalArgs, a: &BenchmarkArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let mut configs = Vec::new();
    for p in g.config.iter().chain(&a.configs) {
        m.add_input(p)?;
        let mut c = FeatureConfig::load(p)?;
        if c.name.is_none() {
            c.name = p.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        configs.push(c);
    }
    if configs.is_empty() && a.external.is_empty() {
        configs.push(FeatureConfig {
            name: Some("full".into()),
            ..FeatureConfig::default()
        });
    }
    let mut externals = Vec::new();
    for spec in &a.external {
        let (outcome, path) = match spec.split_once(':') {
            Some((o, p)) if o.parse::<Outcome>().is_ok() => (Some(o.parse::<Outcome>().expect("checked")), p),
            _ => (None, spec.as_str()),
        };
        let path = Path::new(path);
        m.add_input(path)?;
        let name = path
            .file_stem()
            .map_or("external".into(), |s| s.to_string_lossy().into_owned());
        externals.push(ExternalPredictions::load(&name, outcome, path)?);
    }
    let holdout_cohort = match &a.holdout {
        Some(p) => {
            let c = load_cohort_at(g, p, m)?;
            Some(match &a.exclude_ids {
                Some(x) => {
                    m.add_input(x)?;
                    let ids = read_ids(x)?;
                    c.filter(|r| !ids.contains(&r.id))
                }
                None => c,
            })
        }
        None => None,
    };
    let outcomes = if a.outcomes.is_empty() {
        vec![g.outcome]
    } else {
        a.outcomes.clone()
    };
    let result = m.time("benchmark", || {
        benchmark(
            &cohort,
            &tax,
            &configs,
            &externals,
            &outcomes,
            &g.lambda_grid,
            &settings(g),
            holdout_cohort.as_ref(),
            unit(a.bits),
        )
    })?;
    write_benchmark_csv(&result.rows, &out(g, m, "benchmark.csv"))?;
    for p in &result.predictions {
        let file = format!("predictions_{}_{}_{}.csv", p.outcome, sanitize(&p.model), p.setup);
        let path = out(g, m, &file);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["id", "y", "logit"])?;
        for ((id, y), l) in p.ids.iter().zip(&p.labels).zip(&p.logits) {
            w.write_record([id.clone(), y.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    for r in &result.rows {
        say!(
            "{}\t{}\t{}\tauc {:.4}\tlambda {:.4}\tloglik {:.2}",
            r.outcome,
            r.model,
            r.setup,
            r.auc,
            r.lambda_woe,
            r.log_lik
        );
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn holdout(g: &GlobalArgs, a: &HoldoutArgs, m: &mut RunManifest) -> Result<()> {
    let tax = load_taxonomy(g, m)?;
    let cohort = load_cohort(g, m)?;
    let model = load_model(&a.model, m)?;
    m.selected_lambda = Some(model.selected_lambda);
    let exclude = match &a.exclude_ids {
        Some(p) => {
            m.add_input(p)?;
            read_ids(p)?
        }
        None => HashSet::new(),
    };
    let r = m.time("holdout", || {
        holdout_eval(&model, &tax, &cohort, g.outcome, &exclude, unit(a.bits))
    })?;
    #[derive(Serialize)]
    struct Summary<'a> {
        report: &'a EvaluationReport,
        shift: f64,
        excluded: usize,
        align: crate::featurize::AlignReport,
    }
    save_json(
        &Summary {
            report: &r.evaluation.report,
            shift: r.evaluation.shift,
            excluded: r.excluded,
            align: r.align,
        },
        &out(g, m, "holdout_metrics.json"),
    )?;
    let path = out(g, m, "holdout_predictions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "y", "logit", "adjusted_logit"])?;
    for i in 0..r.ids.len() {
        w.write_record([
            r.ids[i].clone(),
            r.labels[i].to_string(),
            r.raw_logits[i].to_string(),
            r.evaluation.adjusted_logits[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    say!(
        "auc {:.6} lambda {:.6} loglik {:.4} (n = {}, excluded {})",
        r.evaluation.report.auc,
        r.evaluation.report.lambda_woe,
        r.evaluation.report.log_lik,
        r.evaluation.report.n,
        r.excluded
    );
    Ok(())
}

fn split_named(spec: &str, flag: &str) -> Result<(String, PathBuf)> {
    spec.split_once('=')
        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
        .ok_or_else(|| Error::InvalidInput(format!("--{flag} expects name=path, got {spec:?}")))
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "artifact not found"),
        ))
    }
}

/// Total log odds ratio per `(system, code)` from an `effects.csv`.
pub fn read_effects(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let mut r = csv::Reader::from_path(existing(path)?)?;
    let mut outmap = BTreeMap::new();
    for rec in r.deserialize() {
        let row: BTreeMap<String, String> = rec?;
        let get = |k: &str| row.get(k).cloned().unwrap_or_default();
        if get("system").is_empty() {
            continue;
        }
        let v: f64 = get("total_logor")
            .parse()
            .map_err(|e| Error::parse(&path.display().to_string(), 0, format!("bad total_logor: {e}")))?;
        outmap.insert((get("system"), get("code")), v);
    }
    Ok(outmap)
}

fn report(g: &GlobalArgs, a: &ReportArgs, m: &mut RunManifest) -> Result<()> {
    #[derive(Serialize, Default)]
    struct Summary {
        roc_auc: BTreeMap<String, f64>,
        scatter_rows: Option<usize>,
        histogram_rows: Option<usize>,
        profile_rows: Option<usize>,
    }
    let mut summary = Summary::default();
    if !a.roc.is_empty() {
        let cohort = load_cohort(g, m)?;
        let labels = cohort.labels(g.outcome);
        for spec in &a.roc {
            let (name, path) = split_named(spec, "roc")?;
            m.add_input(existing(&path)?)?;
            let logits = align_to_cohort(&read_predictions(&path)?, &cohort, &name)?;
            let points = roc_curve(&logits, &labels)?;
            summary.roc_auc.insert(name.clone(), roc_area(&points));
            write_roc_csv(&points, &out(g, m, &format!("roc_{}.csv", sanitize(&name))))?;
        }
    }
    if !a.effects.is_empty() {
        if a.effects.len() != 2 {
            return Err(Error::InvalidInput("--effects needs exactly two inputs".into()));
        }
        let (na, pa) = split_named(&a.effects[0], "effects")?;
        let (nb, pb) = split_named(&a.effects[1], "effects")?;
        m.add_input(existing(&pa)?)?;
        m.add_input(existing(&pb)?)?;
        let (ea, eb) = (read_effects(&pa)?, read_effects(&pb)?);
        let path = out(g, m, "scatter.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "system".to_string(),
            "code".into(),
            format!("logor_{na}"),
            format!("logor_{nb}"),
        ])?;
        let mut n = 0;
        for (key, va) in &ea {
            if let Some(vb) = eb.get(key) {
                w.write_record([key.0.clone(), key.1.clone(), va.to_string(), vb.to_string()])?;
                n += 1;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        summary.scatter_rows = Some(n);
    }
    if let Some(p) = &a.index {
        m.add_input(existing(p)?)?;
        let (scores, groups) = match &g.cohort {
            Some(_) => {
                let cohort = load_cohort(g, m)?;
                let idx = read_index(p, &cohort)?;
                (
                    idx.scores,
                    cohort.labels(g.outcome).iter().map(|v| v.to_string()).collect(),
                )
            }
            None => {
                let mut r = csv::Reader::from_path(p)?;
                let mut s = Vec::new();
                for rec in r.deserialize() {
                    let (_, _, score): (String, usize, f64) = rec?;
                    s.push(score);
                }
                let n = s.len();
                (s, vec!["all".to_string(); n])
            }
        };
        let hist = score_distribution(&scores, &groups, &score_edges(&scores, a.bins)?)?;
        summary.histogram_rows = Some(hist.len());
        write_histogram_csv(&hist, &out(g, m, "histogram.csv"))?;
    }
    if let Some(p) = &a.profile {
        m.add_input(existing(p)?)?;
        let pairs: Vec<ProfilePair> = load_json(p)?;
        summary.profile_rows = Some(pairs.len());
        write_profile_csv(&pairs, a.grid_step, &out(g, m, "profile.csv"))?;
    }
    save_json(&summary, &out(g, m, "report_summary.json"))
}
