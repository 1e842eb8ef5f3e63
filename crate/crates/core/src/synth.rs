//! Synthetic taxonomies and cohorts with planted effects.
//!
//! Codes are depth-encoded: ICD `D1`, `D1.2`, `D1.2.1`, ...; ATC `A1`, ...;
//! OPS `5-1`, `6-2`, `8-3`, ... with the chapter cycling over 5, 6, 8.
//! Each person draws every leaf independently with probability
//! `base_leaf * (1 + a * z)`, where `z` in `[-1, 1]` is the person's age
//! rescaled over the age-group range.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PersonRecord};
use crate::error::{Error, Result};
use crate::featurize::{
    categorical_column_name, code_column_name, expand_positions, UnknownCodePolicy, INCIDENCE_COLUMN,
};
use crate::riskindex::age_midpoint;
use crate::solver::{logit, sigmoid};
use crate::taxonomy::{CodeNode, CodeSystemId, Taxonomy, OPS_CHAPTERS};

/// Logit shifts that derive the broader and narrower outcomes from the primary one.
pub const Y1_SHIFT: f64 = 0.85;
pub const Y3_SHIFT: f64 = -0.55;

const SHARD_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemShape {
    pub system: CodeSystemId,
    /// Roots first, then children per node for each deeper level.
    pub branching: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDef {
    pub name: String,
    pub levels: Vec<String>,
    /// Relative frequencies; uniform when empty.
    #[serde(default)]
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub systems: Vec<SystemShape>,
    pub n_persons: usize,
    /// Mean leaf prevalence; each leaf draws its base rate from `mean * U(0.5, 1.5)`.
    pub leaf_prevalence: f64,
    /// Strength `a` of the age gradient in code prevalence, `|a| < 1`.
    #[serde(default)]
    pub age_correlation: f64,
    /// True coefficients keyed by feature column name.
    #[serde(default)]
    pub planted: BTreeMap<String, f64>,
    pub intercept: f64,
    #[serde(default)]
    pub categorical: Vec<CategoricalDef>,
    #[serde(default = "default_age_feature")]
    pub age_feature: String,
    #[serde(default)]
    pub regions: Vec<String>,
    /// Range of per-region incidence values.
    #[serde(default = "default_incidence_range")]
    pub incidence_range: (f64, f64),
    pub seed: u64,
}

fn default_age_feature() -> String {
    "age_group".into()
}

fn default_incidence_range() -> (f64, f64) {
    (10.0, 200.0)
}

pub fn age_groups() -> Vec<String> {
    let mut g: Vec<String> = (0..18).map(|i| format!("{}-{}", 5 * i, 5 * i + 4)).collect();
    g.push("90+".into());
    g
}

impl GeneratorSpec {
    /// Three systems, age groups, gender and a handful of regions at about 1% prevalence.
    pub fn preset(n_persons: usize, seed: u64) -> Self {
        GeneratorSpec {
            systems: vec![
                SystemShape {
                    system: CodeSystemId::Icd,
                    branching: vec![4, 3, 3, 2, 2],
                },
                SystemShape {
                    system: CodeSystemId::Atc,
                    branching: vec![3, 2, 2, 2, 2],
                },
                SystemShape {
                    system: CodeSystemId::Ops,
                    branching: vec![3, 2, 2, 2],
                },
            ],
            n_persons,
            leaf_prevalence: 0.02,
            age_correlation: 0.0,
            planted: BTreeMap::new(),
            intercept: logit(0.01),
            categorical: vec![
                CategoricalDef {
                    name: "age_group".into(),
                    levels: age_groups(),
                    weights: Vec::new(),
                },
                CategoricalDef {
                    name: "gender".into(),
                    levels: vec!["F".into(), "M".into()],
                    weights: Vec::new(),
                },
            ],
            age_feature: default_age_feature(),
            regions: (1..=8).map(|i| format!("R{i}")).collect(),
            incidence_range: default_incidence_range(),
            seed,
        }
    }

    /// Plants a fixed mix of code effects at levels 2 to 5 and an age gradient.
    /// Entries whose code does not exist in `taxonomy` are skipped.
    pub fn plant_default_effects(&mut self, taxonomy: &Taxonomy) {
        use CodeSystemId::*;
        let codes = [
            (Icd, 2, 1, 0.8),
            (Icd, 3, 4, 0.9),
            (Icd, 5, 10, 1.2),
            (Atc, 3, 2, 0.8),
            (Atc, 5, 5, 1.0),
            (Ops, 4, 3, 0.9),
        ];
        for (system, level, i, coef) in codes {
            if let Some(code) = codes_at_level(taxonomy, system, level).get(i) {
                self.planted.insert(code.clone(), coef);
            }
        }
        let ages = self
            .categorical
            .iter()
            .find(|c| c.name == self.age_feature)
            .map(|c| c.levels.clone());
        for (label, coef) in [("80-84", 0.7), ("85-89", 0.9), ("90+", 1.0)] {
            if ages.as_ref().is_some_and(|l| l.iter().any(|x| x == label)) {
                self.planted.insert(format!("{}={label}", self.age_feature), coef);
            }
        }
    }

    /// The preset with the outcome as rare as the primary outcome of a real insurer population.
    pub fn rare_outcome(n_persons: usize, seed: u64) -> Self {
        GeneratorSpec {
            intercept: logit(0.000393),
            ..GeneratorSpec::preset(n_persons, seed)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Generator(format!("{}: {e}", path.display())))
    }

    fn validate_shape(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.systems {
            if !seen.insert(s.system) {
                return Err(Error::Generator(format!("system {} listed twice", s.system)));
            }
            let depth = (s.system.max_level() - s.system.root_level() + 1) as usize;
            if s.branching.is_empty() || s.branching.len() > depth {
                return Err(Error::Generator(format!(
                    "{} branching needs 1..={depth} levels, got {}",
                    s.system,
                    s.branching.len()
                )));
            }
            if s.branching.contains(&0) {
                return Err(Error::Generator(format!(
                    "{} branching must be >= 1 at each level",
                    s.system
                )));
            }
        }
        Ok(())
    }
}

fn code_name(system: CodeSystemId, root_index: usize, path: &[usize]) -> String {
    let mut s = match system {
        CodeSystemId::Icd => format!("D{}", root_index + 1),
        CodeSystemId::Atc => format!("A{}", root_index + 1),
        CodeSystemId::Ops => format!("{}-{}", OPS_CHAPTERS[root_index % OPS_CHAPTERS.len()], root_index + 1),
    };
    for p in path {
        s.push('.');
        s.push_str(&(p + 1).to_string());
    }
    s
}

/// Builds the complete tree for every system of the spec.
pub fn generate_taxonomy(spec: &GeneratorSpec) -> Result<Taxonomy> {
    spec.validate_shape()?;
    let mut nodes = Vec::new();
    for shape in &spec.systems {
        let root_level = shape.system.root_level();
        // (code, path below the root, root index)
        let mut frontier: Vec<(String, usize, Vec<usize>)> = Vec::new();
        for r in 0..shape.branching[0] {
            let code = code_name(shape.system, r, &[]);
            nodes.push(CodeNode::new(shape.system, &code, root_level, None));
            frontier.push((code, r, Vec::new()));
        }
        for (depth, &b) in shape.branching.iter().enumerate().skip(1) {
            let level = root_level + depth as u8;
            let mut next = Vec::with_capacity(frontier.len() * b);
            for (parent, r, path) in &frontier {
                for c in 0..b {
                    let mut p = path.clone();
                    p.push(c);
                    let code = code_name(shape.system, *r, &p);
                    nodes.push(CodeNode::new(shape.system, &code, level, Some(parent)));
                    next.push((code, *r, p));
                }
            }
            frontier = next;
        }
    }
    Taxonomy::from_nodes(nodes)
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub true_logit: Vec<f64>,
}

impl SyntheticCohort {
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "true_logit"])?;
        for (r, l) in self.cohort.records().iter().zip(&self.true_logit) {
            w.write_record([r.id.clone(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn read_sidecar(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let (id, l): (String, f64) = rec?;
        out.push((id, l));
    }
    Ok(out)
}

enum Planted {
    Code(usize, f64),
    Category(usize, usize, f64),
    Incidence(f64),
}

fn resolve_planted(spec: &GeneratorSpec, taxonomy: &Taxonomy) -> Result<Vec<Planted>> {
    let mut out = Vec::new();
    for (name, &coef) in &spec.planted {
        if !coef.is_finite() {
            return Err(Error::Generator(format!(
                "planted coefficient for {name} is not finite"
            )));
        }
        if name == INCIDENCE_COLUMN {
            out.push(Planted::Incidence(coef));
            continue;
        }
        if let Some((sys, code)) = name.split_once(':') {
            let system: CodeSystemId = sys
                .parse()
                .map_err(|_| Error::Generator(format!("planted column {name}: unknown system")))?;
            let pos = taxonomy
                .position(system, code)
                .ok_or_else(|| Error::Generator(format!("planted column {name} is not in the taxonomy")))?;
            out.push(Planted::Code(pos, coef));
            continue;
        }
        let found = spec.categorical.iter().enumerate().find_map(|(f, def)| {
            def.levels
                .iter()
                .position(|l| categorical_column_name(&def.name, l) == *name)
                .map(|l| (f, l))
        });
        match found {
            Some((f, l)) => out.push(Planted::Category(f, l, coef)),
            None => return Err(Error::Generator(format!("planted column {name} matches no feature"))),
        }
    }
    Ok(out)
}

fn draw_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Draws persons, codes and nested outcomes; returns the cohort with its true logits.
pub fn generate_cohort(taxonomy: &Taxonomy, spec: &GeneratorSpec) -> Result<SyntheticCohort> {
    if !(spec.leaf_prevalence > 0.0 && spec.leaf_prevalence < 1.0) {
        return Err(Error::Generator(format!(
            "leaf prevalence {} outside (0, 1)",
            spec.leaf_prevalence
        )));
    }
    let a = spec.age_correlation;
    if !(a.abs() < 1.0) {
        return Err(Error::Generator(format!("age correlation {a} must satisfy |a| < 1")));
    }
    if spec.leaf_prevalence * 1.5 * (1.0 + a.abs()) >= 1.0 {
        return Err(Error::Generator(format!(
            "leaf prevalence {} with age correlation {a} exceeds 1 for some persons",
            spec.leaf_prevalence
        )));
    }
    if spec.n_persons == 0 {
        return Err(Error::Generator("n_persons must be positive".into()));
    }
    let (inc_lo, inc_hi) = spec.incidence_range;
    if !(inc_lo >= 0.0 && inc_hi >= inc_lo && inc_hi.is_finite()) {
        return Err(Error::Generator("incidence range must satisfy 0 <= lo <= hi".into()));
    }
    let weights: Vec<Vec<f64>> = spec
        .categorical
        .iter()
        .map(|d| {
            if d.levels.is_empty() {
                return Err(Error::Generator(format!("categorical {} has no levels", d.name)));
            }
            if d.weights.is_empty() {
                return Ok(vec![1.0; d.levels.len()]);
            }
            if d.weights.len() != d.levels.len()
                || d.weights.iter().any(|w| !(*w >= 0.0))
                || d.weights.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Generator(format!("categorical {} has invalid weights", d.name)));
            }
            Ok(d.weights.clone())
        })
        .collect::<Result<_>>()?;
    let planted = resolve_planted(spec, taxonomy)?;

    let leaves: Vec<usize> = (0..taxonomy.len())
        .filter(|&p| {
            let n = taxonomy.node(p);
            taxonomy.children_positions(p).is_empty() && spec.systems.iter().any(|s| s.system == n.system)
        })
        .collect();
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let base: Vec<f64> = leaves
        .iter()
        .map(|_| spec.leaf_prevalence * master.random_range(0.5..1.5))
        .collect();
    let base_max = base.iter().copied().fold(0.0, f64::max);
    let region_incidence: Vec<f64> = spec
        .regions
        .iter()
        .map(|_| {
            if inc_hi > inc_lo {
                master.random_range(inc_lo..inc_hi)
            } else {
                inc_lo
            }
        })
        .collect();

    let age_def = spec.categorical.iter().position(|d| d.name == spec.age_feature);
    let age_values: Option<Vec<f64>> = match age_def {
        Some(f) => Some(
            spec.categorical[f]
                .levels
                .iter()
                .map(|l| age_midpoint(l))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let (age_min, age_max) = age_values.as_ref().map_or((0.0, 0.0), |v| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    });

    let n_shards = spec.n_persons.div_ceil(SHARD_SIZE);
    let shards: Vec<Result<Vec<(PersonRecord, f64)>>> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(shard as u64 + 1);
            let start = shard * SHARD_SIZE;
            let end = (start + SHARD_SIZE).min(spec.n_persons);
            let mut out = Vec::with_capacity(end - start);
            for i in start..end {
                let mut rec = PersonRecord::new(format!("s{i:07}"));
                let mut levels = Vec::with_capacity(spec.categorical.len());
                for (d, w) in spec.categorical.iter().zip(&weights) {
                    let l = draw_weighted(&mut rng, w);
                    rec.categorical.insert(d.name.clone(), d.levels[l].clone());
                    levels.push(l);
                }
                let z = match (&age_values, age_def) {
                    (Some(v), Some(f)) if age_max > age_min => {
                        2.0 * (v[levels[f]] - age_min) / (age_max - age_min) - 1.0
                    }
                    _ => 0.0,
                };
                let scale = 1.0 + a * z;
                // Thinned geometric skipping over leaves: exact per-leaf Bernoulli draws.
                let q = base_max * scale;
                let mut codes = Vec::new();
                if q > 0.0 {
                    let log1mq = (-q).ln_1p();
                    let mut idx = 0usize;
                    loop {
                        let u: f64 = rng.random();
                        let gap = ((1.0 - u).ln() / log1mq).floor();
                        if !(gap < (leaves.len() - idx) as f64) {
                            break;
                        }
                        idx += gap as usize;
                        if rng.random::<f64>() * q < base[idx] * scale {
                            let n = taxonomy.node(leaves[idx]);
                            codes.push((n.system, n.code.clone()));
                        }
                        idx += 1;
                        if idx >= leaves.len() {
                            break;
                        }
                    }
                }
                if !spec.regions.is_empty() {
                    let r = rng.random_range(0..spec.regions.len());
                    rec.region = Some(spec.regions[r].clone());
                    rec.incidence = Some(region_incidence[r]);
                }
                let (expanded, _) = expand_positions(taxonomy, &codes, UnknownCodePolicy::Error)?;
                let mut eta = spec.intercept;
                for p in &planted {
                    match *p {
                        Planted::Code(pos, c) if expanded.contains(&pos) => eta += c,
                        Planted::Category(f, l, c) if levels[f] == l => eta += c,
                        Planted::Incidence(c) => eta += c * rec.incidence.unwrap_or(0.0),
                        _ => {}
                    }
                }
                rec.codes = codes;
                let u: f64 = rng.random();
                rec.y1 = u < sigmoid(eta + Y1_SHIFT);
                rec.y2 = u < sigmoid(eta);
                rec.y3 = u < sigmoid(eta + Y3_SHIFT);
                out.push((rec, eta));
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::with_capacity(spec.n_persons);
    let mut true_logit = Vec::with_capacity(spec.n_persons);
    for s in shards {
        for (r, l) in s? {
            records.push(r);
            true_logit.push(l);
        }
    }
    Ok(SyntheticCohort {
        cohort: Cohort::new(records)?,
        true_logit,
    })
}

/// Column names of the codes at `level` in `system`, in taxonomy order.
pub fn codes_at_level(taxonomy: &Taxonomy, system: CodeSystemId, level: u8) -> Vec<String> {
    taxonomy
        .nodes()
        .iter()
        .filter(|n| n.system == system && n.level == level)
        .map(|n| code_column_name(system, &n.code))
        .collect()
}
