//! Per-code total effects, group log odds ratios and population importance.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{
    code_column_name, column_prevalence, ColumnKind, DesignColumn, FeatureSpace, SparseDesignMatrix,
};
use crate::solver::LassoFit;
use crate::taxonomy::{CodeSystemId, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeEffect {
    pub system: CodeSystemId,
    pub code: String,
    pub level: u8,
    pub own_coef: f64,
    pub total_logor: f64,
    pub total_or: f64,
    pub prevalence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub system: CodeSystemId,
    pub group: String,
    pub group_logor: f64,
    pub group_size: usize,
    pub importance: f64,
    pub rank: usize,
}

impl GroupSummary {
    pub fn label(&self) -> String {
        code_column_name(self.system, &self.group)
    }
}

/// Read-only view joining a fit with its feature space and design.
pub struct EffectContext<'a> {
    pub fit: &'a LassoFit,
    pub space: &'a FeatureSpace,
    pub taxonomy: &'a Taxonomy,
    pub design: &'a SparseDesignMatrix,
    prevalence: Vec<usize>,
}

impl<'a> EffectContext<'a> {
    pub fn new(
        fit: &'a LassoFit,
        space: &'a FeatureSpace,
        taxonomy: &'a Taxonomy,
        design: &'a SparseDesignMatrix,
    ) -> Result<Self> {
        if fit.n_cols != space.len() || design.n_cols() != space.len() {
            return Err(Error::Dimension(format!(
                "fit has {} columns, space {}, design {}",
                fit.n_cols,
                space.len(),
                design.n_cols()
            )));
        }
        Ok(EffectContext {
            fit,
            space,
            taxonomy,
            design,
            prevalence: column_prevalence(design),
        })
    }

    fn own(&self, system: CodeSystemId, code: &str) -> f64 {
        self.space
            .code_position(system, code)
            .map_or(0.0, |j| self.fit.coefficient(j))
    }

    fn prevalence_of(&self, system: CodeSystemId, code: &str) -> usize {
        self.space.code_position(system, code).map_or(0, |j| self.prevalence[j])
    }

    /// Sum of coefficients over the code and all its ancestors.
    pub fn total_code_effect(&self, system: CodeSystemId, code: &str) -> Result<CodeEffect> {
        let chain = self.taxonomy.ancestors(system, code)?;
        let total: f64 = chain.iter().map(|n| self.own(system, &n.code)).sum();
        let node = chain[0];
        Ok(CodeEffect {
            system,
            code: code.to_string(),
            level: node.level,
            own_coef: self.own(system, code),
            total_logor: total,
            total_or: total.exp(),
            prevalence: self.prevalence_of(system, code),
        })
    }

    /// Observed codes under `pos` (inclusive) that have no observed descendant.
    fn observed_leaves(&self, pos: usize) -> Vec<usize> {
        let mut candidates = vec![pos];
        candidates.extend(self.taxonomy.descendant_positions(pos));
        let observed: HashSet<usize> = candidates
            .iter()
            .copied()
            .filter(|&p| {
                let n = self.taxonomy.node(p);
                self.prevalence_of(n.system, &n.code) > 0
            })
            .collect();
        let mut leaves: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|&p| {
                !self
                    .taxonomy
                    .descendant_positions(p)
                    .iter()
                    .any(|d| observed.contains(d))
            })
            .collect();
        leaves.sort_unstable();
        leaves
    }

    /// Persons carrying any code under `pos` (inclusive).
    fn persons_under(&self, pos: usize) -> usize {
        let node = self.taxonomy.node(pos);
        if let Some(j) = self.space.code_position(node.system, &node.code) {
            return self.prevalence[j];
        }
        let mut rows = HashSet::new();
        for d in self.taxonomy.descendant_positions(pos) {
            let n = self.taxonomy.node(d);
            if let Some(j) = self.space.code_position(n.system, &n.code) {
                if let DesignColumn::Binary(r) = self.design.column(j) {
                    rows.extend(r.iter().copied());
                }
            }
        }
        rows.len()
    }

    /// Prevalence-weighted mean total effect over the group's observed leaves.
    pub fn group_logor(&self, system: CodeSystemId, group: &str) -> Result<GroupSummary> {
        let pos = self
            .taxonomy
            .position(system, group)
            .ok_or_else(|| Error::UnknownCode {
                system,
                code: group.to_string(),
            })?;
        let node = self.taxonomy.node(pos);
        if node.level != 2 {
            return Err(Error::InvalidInput(format!(
                "{} is a level-{} code; groups are level 2",
                code_column_name(system, group),
                node.level
            )));
        }
        let leaves = self.observed_leaves(pos);
        if leaves.is_empty() {
            return Err(Error::InvalidInput(format!(
                "group {} has no observed codes",
                code_column_name(system, group)
            )));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for p in leaves {
            let n = self.taxonomy.node(p);
            let e = self.total_code_effect(n.system, &n.code)?;
            num += e.prevalence as f64 * e.total_logor;
            den += e.prevalence as f64;
        }
        let logor = num / den;
        let size = self.persons_under(pos);
        Ok(GroupSummary {
            system,
            group: group.to_string(),
            group_logor: logor,
            group_size: size,
            importance: logor * size as f64,
            rank: 0,
        })
    }

    /// Summaries for every level-2 code of `systems` with an observed descendant.
    pub fn all_groups(&self, systems: &[CodeSystemId]) -> Result<Vec<GroupSummary>> {
        let mut out = Vec::new();
        for (pos, node) in self.taxonomy.nodes().iter().enumerate() {
            if node.level != 2 || !systems.contains(&node.system) || self.observed_leaves(pos).is_empty() {
                continue;
            }
            out.push(self.group_logor(node.system, &node.code)?);
        }
        Ok(out)
    }
}

/// Sets importance and ranks groups by descending importance, ties by label.
pub fn population_importance(mut groups: Vec<GroupSummary>) -> Vec<GroupSummary> {
    for g in &mut groups {
        g.importance = g.group_logor * g.group_size as f64;
    }
    groups.sort_by(|a, b| {
        b.importance
            .total_cmp(&a.importance)
            .then_with(|| a.label().cmp(&b.label()))
    });
    for (i, g) in groups.iter_mut().enumerate() {
        g.rank = i + 1;
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub system: Option<CodeSystemId>,
    pub code: String,
    pub level: Option<u8>,
    pub coef: f64,
    pub total_logor: f64,
    pub total_or: f64,
    pub prevalence: usize,
    pub below_min_size: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelNonzero {
    pub system: CodeSystemId,
    pub level: u8,
    pub columns: usize,
    pub nonzero: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub intercept: f64,
    pub lambda: f64,
    pub n_nonzero: usize,
    pub nonzero_by_system: BTreeMap<CodeSystemId, usize>,
    pub nonzero_by_level: Vec<LevelNonzero>,
    pub min_group_size: usize,
}

/// One row per feature column plus every out-of-space code with a nonzero total effect.
pub fn export_coefficients(ctx: &EffectContext<'_>, min_group_size: usize) -> Result<(Vec<EffectRow>, ExportMetadata)> {
    let mut rows = Vec::new();
    for (j, col) in ctx.space.columns().iter().enumerate() {
        let prevalence = ctx.prevalence[j];
        let row = match (col.kind, col.system) {
            (ColumnKind::CodeDummy, Some(system)) => {
                let e = ctx.total_code_effect(system, &col.key)?;
                EffectRow {
                    system: Some(system),
                    code: e.code,
                    level: Some(e.level),
                    coef: e.own_coef,
                    total_logor: e.total_logor,
                    total_or: e.total_or,
                    prevalence,
                    below_min_size: prevalence < min_group_size,
                }
            }
            _ => {
                let b = ctx.fit.coefficient(j);
                EffectRow {
                    system: None,
                    code: col.name.clone(),
                    level: None,
                    coef: b,
                    total_logor: b,
                    total_or: b.exp(),
                    prevalence,
                    below_min_size: prevalence < min_group_size,
                }
            }
        };
        rows.push(row);
    }
    for node in ctx.taxonomy.nodes() {
        if ctx.space.code_position(node.system, &node.code).is_some() {
            continue;
        }
        let e = ctx.total_code_effect(node.system, &node.code)?;
        if e.total_logor != 0.0 {
            rows.push(EffectRow {
                system: Some(node.system),
                code: e.code,
                level: Some(e.level),
                coef: 0.0,
                total_logor: e.total_logor,
                total_or: e.total_or,
                prevalence: 0,
                below_min_size: min_group_size > 0,
            });
        }
    }

    let mut by_level: BTreeMap<(CodeSystemId, u8), (usize, usize)> = BTreeMap::new();
    let mut by_system: BTreeMap<CodeSystemId, usize> = BTreeMap::new();
    for (j, col) in ctx.space.columns().iter().enumerate() {
        if let (Some(s), Some(l)) = (col.system, col.level) {
            let nz = ctx.fit.coefficient(j) != 0.0;
            let e = by_level.entry((s, l)).or_default();
            e.0 += 1;
            e.1 += nz as usize;
            *by_system.entry(s).or_default() += nz as usize;
        }
    }
    let meta = ExportMetadata {
        intercept: ctx.fit.intercept,
        lambda: ctx.fit.lambda,
        n_nonzero: ctx.fit.n_nonzero,
        nonzero_by_system: by_system,
        nonzero_by_level: by_level
            .into_iter()
            .map(|((system, level), (columns, nonzero))| LevelNonzero {
                system,
                level,
                columns,
                nonzero,
                fraction: nonzero as f64 / columns as f64,
            })
            .collect(),
        min_group_size,
    };
    Ok((rows, meta))
}

pub fn write_effects_csv(rows: &[EffectRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "system",
        "code",
        "level",
        "coef",
        "total_logor",
        "total_or",
        "prevalence",
        "below_min_size",
    ])?;
    for r in rows {
        w.write_record([
            r.system.map(|s| s.to_string()).unwrap_or_default(),
            r.code.clone(),
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            r.coef.to_string(),
            r.total_logor.to_string(),
            r.total_or.to_string(),
            r.prevalence.to_string(),
            r.below_min_size.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_groups_csv(groups: &[GroupSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "logor", "size", "importance", "rank"])?;
    for g in groups {
        w.write_record([
            g.label(),
            g.group_logor.to_string(),
            g.group_size.to_string(),
            g.importance.to_string(),
            g.rank.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(code: &str, logor: f64, size: usize) -> GroupSummary {
        GroupSummary {
            system: CodeSystemId::Icd,
            group: code.into(),
            group_logor: logor,
            group_size: size,
            importance: 0.0,
            rank: 0,
        }
    }

    #[test]
    fn importance_ranking() {
        let ranked = population_importance(vec![group("A", 0.5, 1000), group("B", 0.1, 10000)]);
        assert_eq!(ranked[0].group, "B");
        assert_eq!(ranked[0].importance, 1000.0);
        assert_eq!(ranked[1].importance, 500.0);
        assert_eq!(ranked.iter().map(|g| g.rank).collect::<Vec<_>>(), vec![1, 2]);
        let one = population_importance(vec![group("Z", -0.2, 5)]);
        assert_eq!(one[0].rank, 1);
    }

    #[test]
    fn ties_by_label() {
        let ranked = population_importance(vec![group("C", 1.0, 2), group("B", 2.0, 1)]);
        assert_eq!(ranked[0].group, "B");
    }
}
