//! Hierarchical expansion of observed codes and assembly of the sparse
//! binary design matrix.
//!
//! Every observed code activates its own indicator and the indicators of all
//! its ancestors. Code indicators carry a penalty factor equal to their
//! hierarchy level, categorical dummies a factor of 1, and the continuous
//! incidence column is left unpenalized. Columns are never standardized, so
//! fitted coefficients read directly as log odds ratios.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::taxonomy::{CodeSystemId, Taxonomy};

pub const INCIDENCE_COLUMN: &str = "incidence";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    CodeDummy,
    CategoricalDummy,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<CodeSystemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    pub penalty_factor: f64,
    /// Code for code dummies, feature name for categorical dummies.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub key: String,
    /// Category label for categorical dummies.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub value: String,
}

impl FeatureColumn {
    pub fn code(system: CodeSystemId, code: &str, level: u8, penalty_factor: f64) -> Self {
        FeatureColumn {
            name: code_column_name(system, code),
            kind: ColumnKind::CodeDummy,
            system: Some(system),
            level: Some(level),
            penalty_factor,
            key: code.to_string(),
            value: String::new(),
        }
    }

    pub fn categorical(feature: &str, category: &str) -> Self {
        FeatureColumn {
            name: categorical_column_name(feature, category),
            kind: ColumnKind::CategoricalDummy,
            system: None,
            level: None,
            penalty_factor: 1.0,
            key: feature.to_string(),
            value: category.to_string(),
        }
    }

    pub fn incidence() -> Self {
        FeatureColumn {
            name: INCIDENCE_COLUMN.to_string(),
            kind: ColumnKind::Continuous,
            system: None,
            level: None,
            penalty_factor: 0.0,
            key: String::new(),
            value: String::new(),
        }
    }
}

pub fn code_column_name(system: CodeSystemId, code: &str) -> String {
    format!("{system}:{code}")
}

pub fn categorical_column_name(feature: &str, category: &str) -> String {
    format!("{feature}={category}")
}

/// Ordered column metadata with a name index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<FeatureColumn>", into = "Vec<FeatureColumn>")]
pub struct FeatureSpace {
    columns: Vec<FeatureColumn>,
    index: HashMap<String, usize>,
}

impl From<Vec<FeatureColumn>> for FeatureSpace {
    fn from(columns: Vec<FeatureColumn>) -> Self {
        let index = columns.iter().enumerate().map(|(i, c)| (c.name.clone(), i)).collect();
        FeatureSpace { columns, index }
    }
}

impl From<FeatureSpace> for Vec<FeatureColumn> {
    fn from(space: FeatureSpace) -> Self {
        space.columns
    }
}

impl FeatureSpace {
    pub fn new(columns: Vec<FeatureColumn>) -> Result<Self> {
        let space = FeatureSpace::from(columns);
        if space.index.len() != space.columns.len() {
            return Err(Error::Config("duplicate column names".into()));
        }
        Ok(space)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &FeatureColumn {
        &self.columns[j]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn code_position(&self, system: CodeSystemId, code: &str) -> Option<usize> {
        self.position(&code_column_name(system, code))
    }

    pub fn penalty_factors(&self) -> Vec<f64> {
        self.columns.iter().map(|c| c.penalty_factor).collect()
    }

    /// Positions of all categorical dummies of `feature`.
    pub fn feature_columns(&self, feature: &str) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::CategoricalDummy && c.key == feature)
            .map(|(j, _)| j)
            .collect()
    }
}

/// One column of the design: sorted row indices for binary columns, dense
/// values for continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub enum DesignColumn {
    Binary(Vec<u32>),
    Dense(Vec<f64>),
}

impl DesignColumn {
    pub fn nnz(&self) -> usize {
        match self {
            DesignColumn::Binary(rows) => rows.len(),
            DesignColumn::Dense(v) => v.iter().filter(|x| **x != 0.0).count(),
        }
    }

    pub fn value(&self, row: usize) -> f64 {
        match self {
            DesignColumn::Binary(rows) => rows.binary_search(&(row as u32)).is_ok() as u8 as f64,
            DesignColumn::Dense(v) => v[row],
        }
    }
}

/// Column-compressed binary storage with dense continuous columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDesignMatrix {
    n_rows: usize,
    columns: Vec<DesignColumn>,
}

impl SparseDesignMatrix {
    pub fn new(n_rows: usize, columns: Vec<DesignColumn>) -> Result<Self> {
        for (j, col) in columns.iter().enumerate() {
            match col {
                DesignColumn::Binary(rows) => {
                    if rows.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Dimension(format!(
                            "column {j}: row indices must be strictly increasing"
                        )));
                    }
                    if rows.last().is_some_and(|&r| r as usize >= n_rows) {
                        return Err(Error::Dimension(format!(
                            "column {j}: row index out of range [0, {n_rows})"
                        )));
                    }
                }
                DesignColumn::Dense(v) => {
                    if v.len() != n_rows {
                        return Err(Error::Dimension(format!(
                            "column {j}: dense length {} != n_rows {n_rows}",
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::InvalidInput(format!("column {j}: non-finite value")));
                    }
                }
            }
        }
        Ok(SparseDesignMatrix { n_rows, columns })
    }

    /// Builds from a dense row-major 0/1 matrix; for tests and small examples.
    pub fn from_dense_binary(rows: &[Vec<u8>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut cols = vec![Vec::new(); n_cols];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::Dimension("ragged dense matrix".into()));
            }
            for (j, &x) in row.iter().enumerate() {
                if x != 0 {
                    cols[j].push(i as u32);
                }
            }
        }
        Self::new(n_rows, cols.into_iter().map(DesignColumn::Binary).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[DesignColumn] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &DesignColumn {
        &self.columns[j]
    }

    /// Number of set entries across binary columns.
    pub fn binary_nnz(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                DesignColumn::Binary(r) => r.len(),
                DesignColumn::Dense(_) => 0,
            })
            .sum()
    }

    /// Row-major dense copy; for tests on small instances.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols()]; self.n_rows];
        for (j, col) in self.columns.iter().enumerate() {
            match col {
                DesignColumn::Binary(rows) => rows.iter().for_each(|&r| out[r as usize][j] = 1.0),
                DesignColumn::Dense(v) => v.iter().enumerate().for_each(|(i, &x)| out[i][j] = x),
            }
        }
        out
    }

    /// Submatrix with the given rows, in the given order. `rows` must be
    /// strictly increasing.
    pub fn select_rows(&self, rows: &[usize]) -> SparseDesignMatrix {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let mut new_index = vec![u32::MAX; self.n_rows];
        for (k, &r) in rows.iter().enumerate() {
            new_index[r] = k as u32;
        }
        let columns = self
            .columns
            .iter()
            .map(|col| match col {
                DesignColumn::Binary(old) => DesignColumn::Binary(
                    old.iter()
                        .map(|&r| new_index[r as usize])
                        .filter(|&r| r != u32::MAX)
                        .collect(),
                ),
                DesignColumn::Dense(v) => DesignColumn::Dense(rows.iter().map(|&r| v[r]).collect()),
            })
            .collect();
        SparseDesignMatrix {
            n_rows: rows.len(),
            columns,
        }
    }

    /// `intercept + X β` for a sparse coefficient list `(column, value)`.
    pub fn linear_predictor(&self, intercept: f64, coefficients: &[(usize, f64)]) -> Vec<f64> {
        let mut eta = vec![intercept; self.n_rows];
        for &(j, b) in coefficients {
            match &self.columns[j] {
                DesignColumn::Binary(rows) => rows.iter().for_each(|&r| eta[r as usize] += b),
                DesignColumn::Dense(v) => eta.iter_mut().zip(v).for_each(|(e, x)| *e += b * x),
            }
        }
        eta
    }

    /// Appends the columns of `other` (same row count).
    pub fn hstack(&self, other: &SparseDesignMatrix) -> Result<SparseDesignMatrix> {
        if self.n_rows != other.n_rows {
            return Err(Error::Dimension(format!(
                "hstack: {} rows vs {} rows",
                self.n_rows, other.n_rows
            )));
        }
        let mut columns = self.columns.clone();
        columns.extend(other.columns.iter().cloned());
        Ok(SparseDesignMatrix {
            n_rows: self.n_rows,
            columns,
        })
    }
}

/// Per-column count of rows with a nonzero entry.
pub fn column_prevalence(design: &SparseDesignMatrix) -> Vec<usize> {
    design.columns.iter().map(DesignColumn::nnz).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Code dummies are penalized by their hierarchy level.
    #[default]
    Level,
    /// All binary columns share a factor of 1.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnknownCodePolicy {
    #[default]
    Error,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub name: String,
    /// Omitted category; defaults to the most frequent one.
    #[serde(default)]
    pub reference: Option<String>,
}

fn all_systems() -> Vec<CodeSystemId> {
    CodeSystemId::ALL.to_vec()
}

fn yes() -> bool {
    true
}

/// Declarative description of the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Label used in benchmark tables.
    #[serde(default)]
    pub name: Option<String>,
    /// Categorical features to include; `None` includes every feature in the
    /// cohort dictionary.
    #[serde(default)]
    pub categorical: Option<Vec<CategoricalSpec>>,
    #[serde(default = "all_systems")]
    pub systems: Vec<CodeSystemId>,
    /// Keep only these hierarchy levels.
    #[serde(default)]
    pub levels: Option<Vec<u8>>,
    #[serde(default)]
    pub max_level: Option<u8>,
    /// Keep only these codes (explicit group lists).
    #[serde(default)]
    pub groups: Option<Vec<(CodeSystemId, String)>>,
    #[serde(default)]
    pub penalty_mode: PenaltyMode,
    #[serde(default)]
    pub unknown_codes: UnknownCodePolicy,
    #[serde(default = "yes")]
    pub include_incidence: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            name: None,
            categorical: None,
            systems: all_systems(),
            levels: None,
            max_level: None,
            groups: None,
            penalty_mode: PenaltyMode::Level,
            unknown_codes: UnknownCodePolicy::Error,
            include_incidence: true,
        }
    }
}

impl FeatureConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Only the listed categorical features, no codes, no incidence.
    pub fn categorical_only(features: &[&str]) -> Self {
        FeatureConfig {
            categorical: Some(
                features
                    .iter()
                    .map(|f| CategoricalSpec {
                        name: f.to_string(),
                        reference: None,
                    })
                    .collect(),
            ),
            systems: Vec::new(),
            include_incidence: false,
            ..FeatureConfig::default()
        }
    }

    fn keeps_level(&self, level: u8) -> bool {
        self.max_level.is_none_or(|m| level <= m) && self.levels.as_ref().is_none_or(|ls| ls.contains(&level))
    }
}

/// Union of the ancestor chains of `codes`, as taxonomy positions. Unknown
/// codes either fail or are counted and skipped.
pub fn expand_positions(
    taxonomy: &Taxonomy,
    codes: &[(CodeSystemId, String)],
    policy: UnknownCodePolicy,
) -> Result<(BTreeSet<usize>, usize)> {
    let mut out = BTreeSet::new();
    let mut skipped = 0;
    for (system, code) in codes {
        match taxonomy.position(*system, code) {
            Some(pos) => {
                // Stop walking up once an already-included ancestor is hit.
                let mut cur = Some(pos);
                while let Some(p) = cur {
                    if !out.insert(p) {
                        break;
                    }
                    cur = taxonomy.parent_position(p);
                }
            }
            None => match policy {
                UnknownCodePolicy::Error => {
                    return Err(Error::UnknownCode {
                        system: *system,
                        code: code.clone(),
                    })
                }
                UnknownCodePolicy::Skip => skipped += 1,
            },
        }
    }
    Ok((out, skipped))
}

/// Union of the ancestor chains of all `codes`.
pub fn expand_codes(taxonomy: &Taxonomy, codes: &[(CodeSystemId, String)]) -> Result<BTreeSet<(CodeSystemId, String)>> {
    let (positions, _) = expand_positions(taxonomy, codes, UnknownCodePolicy::Error)?;
    Ok(positions
        .into_iter()
        .map(|p| {
            let n = taxonomy.node(p);
            (n.system, n.code.clone())
        })
        .collect())
}

/// Counts of inputs that did not map onto a frozen feature space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignReport {
    pub unknown_codes: usize,
    pub codes_outside_space: usize,
    /// Persons lacking a categorical feature the space encodes.
    pub missing_features: usize,
}

fn resolve_categoricals(cohort: &Cohort, config: &FeatureConfig) -> Result<Vec<(String, String, Vec<String>)>> {
    let specs: Vec<CategoricalSpec> = match &config.categorical {
        Some(s) => s.clone(),
        None => cohort
            .dictionary()
            .keys()
            .map(|k| CategoricalSpec {
                name: k.clone(),
                reference: None,
            })
            .collect(),
    };
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let Some(categories) = cohort.dictionary().get(&spec.name) else {
            return Err(Error::Config(format!("unknown categorical feature `{}`", spec.name)));
        };
        let mut counts: BTreeMap<&str, usize> = categories.iter().map(|c| (c.as_str(), 0)).collect();
        for r in cohort.records() {
            if let Some(v) = r.categorical.get(&spec.name) {
                *counts.get_mut(v.as_str()).expect("dictionary covers values") += 1;
            }
        }
        let reference = match spec.reference {
            Some(r) => {
                if !categories.contains(&r) {
                    return Err(Error::Config(format!(
                        "reference category `{r}` not observed for feature `{}`",
                        spec.name
                    )));
                }
                r
            }
            // Most frequent; ties go to the lexicographically smallest label.
            None => counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(c, _)| c.to_string())
                .expect("observed feature has at least one category"),
        };
        let others = categories.iter().filter(|c| **c != reference).cloned().collect();
        out.push((spec.name, reference, others));
    }
    Ok(out)
}

/// Expands every person and assembles the feature space and design matrix.
///
/// Columns are ordered as categorical dummies (config order, categories
/// sorted), code dummies sorted by (system, level, code), then incidence.
/// Code columns that no person activates are omitted.
pub fn build_design(
    cohort: &Cohort,
    taxonomy: &Taxonomy,
    config: &FeatureConfig,
) -> Result<(FeatureSpace, SparseDesignMatrix)> {
    if cohort.is_empty() {
        return Err(Error::Config("cannot build a design from an empty cohort".into()));
    }
    if let Some(groups) = &config.groups {
        for (s, c) in groups {
            if taxonomy.position(*s, c).is_none() {
                return Err(Error::UnknownCode {
                    system: *s,
                    code: c.clone(),
                });
            }
        }
    }
    let categoricals = resolve_categoricals(cohort, config)?;
    let group_set: Option<HashSet<usize>> = config
        .groups
        .as_ref()
        .map(|g| g.iter().filter_map(|(s, c)| taxonomy.position(*s, c)).collect());

    let keep = |pos: usize| -> bool {
        let node = taxonomy.node(pos);
        config.systems.contains(&node.system)
            && config.keeps_level(node.level)
            && group_set.as_ref().is_none_or(|g| g.contains(&pos))
    };

    let expanded: Vec<BTreeSet<usize>> = cohort
        .records()
        .par_iter()
        .map(|r| {
            let codes: Vec<_> = r
                .codes
                .iter()
                .filter(|(s, _)| config.systems.contains(s))
                .cloned()
                .collect();
            let (set, skipped) = expand_positions(taxonomy, &codes, config.unknown_codes)?;
            if skipped > 0 {
                log::warn!("record {}: skipped {skipped} unknown code(s)", r.id);
            }
            Ok(set.into_iter().filter(|&p| keep(p)).collect())
        })
        .collect::<Result<_>>()?;

    let mut used: BTreeSet<usize> = BTreeSet::new();
    expanded.iter().for_each(|s| used.extend(s.iter().copied()));
    let mut code_positions: Vec<usize> = used.into_iter().collect();
    code_positions.sort_by(|&a, &b| {
        let (na, nb) = (taxonomy.node(a), taxonomy.node(b));
        (na.system, na.level, &na.code).cmp(&(nb.system, nb.level, &nb.code))
    });

    let mut columns = Vec::new();
    for (feature, _, others) in &categoricals {
        for cat in others {
            columns.push(FeatureColumn::categorical(feature, cat));
        }
    }
    for &pos in &code_positions {
        let node = taxonomy.node(pos);
        let penalty = match config.penalty_mode {
            PenaltyMode::Level => node.level as f64,
            PenaltyMode::Uniform => 1.0,
        };
        columns.push(FeatureColumn::code(node.system, &node.code, node.level, penalty));
    }
    if config.include_incidence {
        columns.push(FeatureColumn::incidence());
    }
    let space = FeatureSpace::new(columns)?;
    let (design, report) = assemble(cohort, taxonomy, &space, Some(&expanded), config.unknown_codes)?;
    debug_assert_eq!(report, AlignReport::default());
    Ok((space, design))
}

/// Builds a design for `cohort` aligned to a frozen feature space. Codes and
/// categories the space does not know are ignored and counted.
pub fn build_design_for_space(
    cohort: &Cohort,
    taxonomy: &Taxonomy,
    space: &FeatureSpace,
) -> Result<(SparseDesignMatrix, AlignReport)> {
    assemble(cohort, taxonomy, space, None, UnknownCodePolicy::Skip)
}

fn assemble(
    cohort: &Cohort,
    taxonomy: &Taxonomy,
    space: &FeatureSpace,
    expanded: Option<&[BTreeSet<usize>]>,
    policy: UnknownCodePolicy,
) -> Result<(SparseDesignMatrix, AlignReport)> {
    let n = cohort.len();
    let mut report = AlignReport::default();
    // Taxonomy position -> column.
    let mut code_col: HashMap<usize, usize> = HashMap::new();
    let mut feature_cols: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
    let mut incidence_col = None;
    for (j, c) in space.columns().iter().enumerate() {
        match c.kind {
            ColumnKind::CodeDummy => {
                let system = c
                    .system
                    .ok_or_else(|| Error::Config(format!("code column {} lacks a system", c.name)))?;
                if let Some(pos) = taxonomy.position(system, &c.key) {
                    code_col.insert(pos, j);
                }
            }
            ColumnKind::CategoricalDummy => {
                feature_cols
                    .entry(c.key.as_str())
                    .or_default()
                    .insert(c.value.as_str(), j);
            }
            ColumnKind::Continuous => incidence_col = Some(j),
        }
    }

    let mut binary: Vec<Vec<u32>> = vec![Vec::new(); space.len()];
    let mut dense = incidence_col.map(|_| Vec::with_capacity(n));
    for (i, r) in cohort.records().iter().enumerate() {
        for (feature, cats) in &feature_cols {
            match r.categorical.get(*feature) {
                Some(v) => {
                    if let Some(&j) = cats.get(v.as_str()) {
                        binary[j].push(i as u32);
                    }
                }
                None => report.missing_features += 1,
            }
        }
        let owned;
        let positions = match expanded {
            Some(e) => &e[i],
            None => {
                let (set, skipped) = expand_positions(taxonomy, &r.codes, policy)?;
                report.unknown_codes += skipped;
                owned = set;
                &owned
            }
        };
        let mut outside = false;
        for p in positions {
            match code_col.get(p) {
                Some(&j) => binary[j].push(i as u32),
                None => outside = true,
            }
        }
        if outside && expanded.is_none() {
            report.codes_outside_space += 1;
        }
        if let Some(d) = dense.as_mut() {
            let v = r.incidence.ok_or_else(|| {
                Error::Config(format!(
                    "record {} has no incidence; impute before building the design",
                    r.id
                ))
            })?;
            d.push(v);
        }
    }
    let columns = space
        .columns()
        .iter()
        .enumerate()
        .map(|(j, c)| match c.kind {
            ColumnKind::Continuous => DesignColumn::Dense(dense.take().unwrap_or_default()),
            _ => DesignColumn::Binary(std::mem::take(&mut binary[j])),
        })
        .collect();
    Ok((SparseDesignMatrix::new(n, columns)?, report))
}

const CACHE_MAGIC: &[u8; 8] = b"CLRKDSM\x01";

/// Writes the design (with its column table) in the binary cache layout:
///
/// ```text
/// magic    8 bytes  "CLRKDSM\x01"
/// n_rows   u64 LE
/// n_cols   u64 LE
/// per column: kind u8 (0 code, 1 categorical, 2 continuous),
///             system u8 (0 ICD, 1 ATC, 2 OPS, 255 none), level u8 (0 none),
///             penalty f64 LE, then name, key, value as (u32 LE len, UTF-8)
/// per column: binary -> u64 LE count, then count x u32 LE row indices
///             dense  -> n_rows x f64 LE
/// ```
pub fn write_design_cache<W: Write>(
    mut out: W,
    space: &FeatureSpace,
    design: &SparseDesignMatrix,
) -> std::io::Result<()> {
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&(design.n_rows as u64).to_le_bytes())?;
    out.write_all(&(design.n_cols() as u64).to_le_bytes())?;
    for c in space.columns() {
        let kind = match c.kind {
            ColumnKind::CodeDummy => 0u8,
            ColumnKind::CategoricalDummy => 1,
            ColumnKind::Continuous => 2,
        };
        let system = match c.system {
            Some(CodeSystemId::Icd) => 0u8,
            Some(CodeSystemId::Atc) => 1,
            Some(CodeSystemId::Ops) => 2,
            None => 255,
        };
        out.write_all(&[kind, system, c.level.unwrap_or(0)])?;
        out.write_all(&c.penalty_factor.to_le_bytes())?;
        for s in [&c.name, &c.key, &c.value] {
            out.write_all(&(s.len() as u32).to_le_bytes())?;
            out.write_all(s.as_bytes())?;
        }
    }
    for col in design.columns() {
        match col {
            DesignColumn::Binary(rows) => {
                out.write_all(&(rows.len() as u64).to_le_bytes())?;
                for r in rows {
                    out.write_all(&r.to_le_bytes())?;
                }
            }
            DesignColumn::Dense(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

struct CacheReader<R> {
    inner: R,
}

impl<R: Read> CacheReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Cache(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = u32::from_le_bytes(self.bytes()?) as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Cache(format!("truncated: {e}")))?;
        String::from_utf8(buf).map_err(|_| Error::Cache("invalid UTF-8 in column table".into()))
    }
}

pub fn read_design_cache<R: Read>(reader: R) -> Result<(FeatureSpace, SparseDesignMatrix)> {
    let mut rd = CacheReader { inner: reader };
    if &rd.bytes::<8>()? != CACHE_MAGIC {
        return Err(Error::Cache("bad magic header".into()));
    }
    let n_rows = rd.u64()? as usize;
    let n_cols = rd.u64()? as usize;
    let mut columns = Vec::with_capacity(n_cols.min(1 << 20));
    for _ in 0..n_cols {
        let [kind, system, level] = rd.bytes::<3>()?;
        let penalty_factor = f64::from_le_bytes(rd.bytes()?);
        let kind = match kind {
            0 => ColumnKind::CodeDummy,
            1 => ColumnKind::CategoricalDummy,
            2 => ColumnKind::Continuous,
            k => return Err(Error::Cache(format!("unknown column kind {k}"))),
        };
        let system = match system {
            0 => Some(CodeSystemId::Icd),
            1 => Some(CodeSystemId::Atc),
            2 => Some(CodeSystemId::Ops),
            255 => None,
            s => return Err(Error::Cache(format!("unknown system tag {s}"))),
        };
        columns.push(FeatureColumn {
            name: rd.string()?,
            kind,
            system,
            level: (level != 0).then_some(level),
            penalty_factor,
            key: rd.string()?,
            value: rd.string()?,
        });
    }
    let mut data = Vec::with_capacity(n_cols.min(1 << 20));
    for c in &columns {
        if c.kind == ColumnKind::Continuous {
            let mut v = Vec::with_capacity(n_rows);
            for _ in 0..n_rows {
                v.push(f64::from_le_bytes(rd.bytes()?));
            }
            data.push(DesignColumn::Dense(v));
        } else {
            let count = rd.u64()? as usize;
            if count > n_rows {
                return Err(Error::Cache(format!("column {} claims {count} rows", c.name)));
            }
            let mut rows = Vec::with_capacity(count);
            for _ in 0..count {
                rows.push(u32::from_le_bytes(rd.bytes()?));
            }
            data.push(DesignColumn::Binary(rows));
        }
    }
    let space = FeatureSpace::new(columns).map_err(|e| Error::Cache(e.to_string()))?;
    let design = SparseDesignMatrix::new(n_rows, data).map_err(|e| Error::Cache(e.to_string()))?;
    Ok((space, design))
}
