//! Hierarchical code dictionaries for diagnoses (ICD), drugs (ATC) and
//! procedures (OPS).
//!
//! The hierarchy is taken verbatim from explicit parent links in the
//! dictionary file. Code strings are never parsed for structure, with one
//! exception: the OPS chapter is the leading character of the key, and only
//! chapters 5, 6 and 8 are admitted. The chapter itself is not a node, so OPS
//! roots sit at level 2.
//!
//! For orientation, the full German dictionaries hold the following number of
//! codes per level (ATC / ICD-10-GM / OPS):
//!
//! | level | ATC   | ICD   | OPS   |
//! |-------|-------|-------|-------|
//! | 1     | 14    | 22    | -     |
//! | 2     | 99    | 241   | 43    |
//! | 3     | 275   | 1,697 | 137   |
//! | 4     | 1,023 | 8,876 | 953   |
//! | 5     | 6,787 | 5,514 | 7,681 |

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAXONOMY_HEADER: &str = "system\tcode\tlevel\tparent\tname";

/// OPS chapters admitted into the information set.
pub const OPS_CHAPTERS: [char; 3] = ['5', '6', '8'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodeSystemId {
    #[serde(rename = "ICD")]
    Icd,
    #[serde(rename = "ATC")]
    Atc,
    #[serde(rename = "OPS")]
    Ops,
}

impl CodeSystemId {
    pub const ALL: [CodeSystemId; 3] = [CodeSystemId::Icd, CodeSystemId::Atc, CodeSystemId::Ops];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeSystemId::Icd => "ICD",
            CodeSystemId::Atc => "ATC",
            CodeSystemId::Ops => "OPS",
        }
    }

    /// Level of the root nodes: 1 for ICD/ATC, 2 for OPS (chapter dropped).
    pub fn root_level(self) -> u8 {
        match self {
            CodeSystemId::Ops => 2,
            _ => 1,
        }
    }

    pub fn max_level(self) -> u8 {
        5
    }
}

impl fmt::Display for CodeSystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeSystemId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ICD" => Ok(CodeSystemId::Icd),
            "ATC" => Ok(CodeSystemId::Atc),
            "OPS" => Ok(CodeSystemId::Ops),
            other => Err(format!("unknown code system `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeNode {
    pub code: String,
    pub system: CodeSystemId,
    pub level: u8,
    pub parent: Option<String>,
    pub name: Option<String>,
}

impl CodeNode {
    pub fn new(system: CodeSystemId, code: &str, level: u8, parent: Option<&str>) -> Self {
        CodeNode {
            code: code.to_string(),
            system,
            level,
            parent: parent.map(str::to_string),
            name: None,
        }
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn is_root(&self) -> bool {
        self.level == self.system.root_level()
    }
}

/// Validated, immutable code hierarchy.
#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    nodes: Vec<CodeNode>,
    index: HashMap<(CodeSystemId, String), usize>,
    parent_of: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

impl Taxonomy {
    /// Builds a taxonomy from nodes, validating every invariant. Errors refer
    /// to the node position (1-based) in `nodes`.
    pub fn from_nodes(nodes: Vec<CodeNode>) -> Result<Self> {
        let numbered = nodes.into_iter().enumerate().map(|(i, n)| (i + 1, n)).collect();
        Self::validate("nodes", numbered)
    }

    fn validate(source_name: &str, numbered: Vec<(usize, CodeNode)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(numbered.len());
        for (pos, (line, node)) in numbered.iter().enumerate() {
            let root = node.system.root_level();
            if node.level < root || node.level > node.system.max_level() {
                return Err(Error::parse(
                    source_name,
                    *line,
                    format!(
                        "level {} out of range [{root}, 5] for {} code {}",
                        node.level, node.system, node.code
                    ),
                ));
            }
            if node.code.is_empty() {
                return Err(Error::parse(source_name, *line, "empty code"));
            }
            if node.system == CodeSystemId::Ops {
                let chapter = node.code.chars().next().unwrap_or(' ');
                if !OPS_CHAPTERS.contains(&chapter) {
                    return Err(Error::parse(
                        source_name,
                        *line,
                        format!("OPS code {} lies outside chapters 5, 6 and 8", node.code),
                    ));
                }
            }
            match (&node.parent, node.level == root) {
                (Some(p), true) => {
                    return Err(Error::parse(
                        source_name,
                        *line,
                        format!("root-level code {} must not have a parent (found {p})", node.code),
                    ))
                }
                (None, false) => {
                    return Err(Error::parse(
                        source_name,
                        *line,
                        format!("code {} at level {} has no parent", node.code, node.level),
                    ))
                }
                _ => {}
            }
            if index.insert((node.system, node.code.clone()), pos).is_some() {
                return Err(Error::parse(
                    source_name,
                    *line,
                    format!("duplicate code {}:{}", node.system, node.code),
                ));
            }
        }

        let mut parent_of = vec![None; numbered.len()];
        let mut children = vec![Vec::new(); numbered.len()];
        for (pos, (line, node)) in numbered.iter().enumerate() {
            let Some(parent) = &node.parent else { continue };
            let Some(&ppos) = index.get(&(node.system, parent.clone())) else {
                return Err(Error::parse(
                    source_name,
                    *line,
                    format!("dangling parent {}:{parent} of {}", node.system, node.code),
                ));
            };
            let plevel = numbered[ppos].1.level;
            if plevel + 1 != node.level {
                return Err(Error::parse(
                    source_name,
                    *line,
                    format!(
                        "level gap: {} (level {}) has parent {parent} at level {plevel}",
                        node.code, node.level
                    ),
                ));
            }
            parent_of[pos] = Some(ppos);
            children[ppos].push(pos);
        }

        Ok(Taxonomy {
            nodes: numbered.into_iter().map(|(_, n)| n).collect(),
            index,
            parent_of,
            children,
        })
    }

    pub fn read<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let reader = BufReader::new(reader);
        let mut numbered = Vec::new();
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if !saw_header {
                if line.trim().is_empty() {
                    continue;
                }
                if line != TAXONOMY_HEADER {
                    return Err(Error::parse(
                        source_name,
                        lineno,
                        format!("expected header `{}`", TAXONOMY_HEADER.replace('\t', "\\t")),
                    ));
                }
                saw_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("expected 5 tab-separated columns, found {}", fields.len()),
                ));
            }
            let system = CodeSystemId::from_str(fields[0]).map_err(|e| Error::parse(source_name, lineno, e))?;
            let level: u8 = fields[2]
                .parse()
                .map_err(|_| Error::parse(source_name, lineno, format!("invalid level `{}`", fields[2])))?;
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            numbered.push((
                lineno,
                CodeNode {
                    code: fields[1].to_string(),
                    system,
                    level,
                    parent: opt(fields[3]),
                    name: opt(fields[4]),
                },
            ));
        }
        Self::validate(source_name, numbered)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file, &path.display().to_string())
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TAXONOMY_HEADER}")?;
        for n in &self.nodes {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                n.system,
                n.code,
                n.level,
                n.parent.as_deref().unwrap_or(""),
                n.name.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[CodeNode] {
        &self.nodes
    }

    pub fn position(&self, system: CodeSystemId, code: &str) -> Option<usize> {
        // HashMap<(_, String)> cannot be queried by &str without allocating.
        self.index.get(&(system, code.to_string())).copied()
    }

    pub fn get(&self, system: CodeSystemId, code: &str) -> Option<&CodeNode> {
        self.position(system, code).map(|i| &self.nodes[i])
    }

    pub fn node(&self, pos: usize) -> &CodeNode {
        &self.nodes[pos]
    }

    pub fn parent_position(&self, pos: usize) -> Option<usize> {
        self.parent_of[pos]
    }

    pub fn children_positions(&self, pos: usize) -> &[usize] {
        &self.children[pos]
    }

    fn lookup(&self, system: CodeSystemId, code: &str) -> Result<usize> {
        self.position(system, code).ok_or_else(|| Error::UnknownCode {
            system,
            code: code.to_string(),
        })
    }

    /// Node positions from the root down to `pos` inclusive.
    pub fn ancestor_positions(&self, pos: usize) -> Vec<usize> {
        let mut chain = vec![pos];
        let mut cur = pos;
        while let Some(p) = self.parent_of[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// The chain from the root-most node down to and including `code`,
    /// ordered by ascending level.
    pub fn ancestors(&self, system: CodeSystemId, code: &str) -> Result<Vec<&CodeNode>> {
        let pos = self.lookup(system, code)?;
        Ok(self
            .ancestor_positions(pos)
            .into_iter()
            .map(|p| &self.nodes[p])
            .collect())
    }

    /// All strict descendants of `pos`, depth-first in file order.
    pub fn descendant_positions(&self, pos: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.children[pos].iter().rev().copied().collect();
        while let Some(p) = stack.pop() {
            out.push(p);
            stack.extend(self.children[p].iter().rev().copied());
        }
        out
    }

    pub fn level_counts(&self) -> LevelCounts {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry((n.system, n.level)).or_insert(0) += 1;
        }
        LevelCounts { counts }
    }
}

/// Node counts per (system, level).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LevelCounts {
    counts: BTreeMap<(CodeSystemId, u8), usize>,
}

impl LevelCounts {
    pub fn get(&self, system: CodeSystemId, level: u8) -> usize {
        self.counts.get(&(system, level)).copied().unwrap_or(0)
    }

    pub fn total(&self, system: CodeSystemId) -> usize {
        self.counts
            .iter()
            .filter(|((s, _), _)| *s == system)
            .map(|(_, c)| c)
            .sum()
    }

    /// Dense rows `(system, level, count)` for levels 1..=5 of every system.
    pub fn rows(&self) -> Vec<(CodeSystemId, u8, usize)> {
        CodeSystemId::ALL
            .iter()
            .flat_map(|&s| (1..=5).map(move |l| (s, l)))
            .map(|(s, l)| (s, l, self.get(s, l)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ICD_CHAIN: &str = "system\tcode\tlevel\tparent\tname
ICD\tIX\t1\t\tDiseases of the circulatory system
ICD\tI20-I25\t2\tIX\tIschaemic heart diseases
ICD\tI25\t3\tI20-I25\tChronic ischaemic heart disease
ICD\tI25.2\t4\tI25\tOld myocardial infarction
ICD\tI25.22\t5\tI25.2\tOld myocardial infarction, more than one year past
";

    fn parse(s: &str) -> Result<Taxonomy> {
        Taxonomy::read(s.as_bytes(), "test.tsv")
    }

    #[test]
    fn loads_icd_chain() {
        let tax = parse(ICD_CHAIN).unwrap();
        assert_eq!(tax.len(), 5);
        let chain: Vec<_> = tax
            .ancestors(CodeSystemId::Icd, "I25.22")
            .unwrap()
            .iter()
            .map(|n| n.code.as_str())
            .collect();
        assert_eq!(chain, ["IX", "I20-I25", "I25", "I25.2", "I25.22"]);
        let root: Vec<_> = tax.ancestors(CodeSystemId::Icd, "IX").unwrap();
        assert_eq!(root.len(), 1);
    }

    #[test]
    fn empty_file_is_empty_taxonomy() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse(&format!("{TAXONOMY_HEADER}\n")).unwrap().is_empty());
        let counts = Taxonomy::default().level_counts();
        assert!(counts.rows().iter().all(|r| r.2 == 0));
    }

    #[test]
    fn level_gap_reported_at_line() {
        let bad = ICD_CHAIN.replace("I25.2\t4\tI25\t", "I25.2\t4\tI20-I25\t");
        match parse(&bad) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 5);
                assert!(message.contains("level gap"), "{message}");
            }
            other => panic!("expected level gap, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_rows() {
        let wrong_cols = format!("{TAXONOMY_HEADER}\nICD\tIX\t1\t\n");
        assert!(matches!(parse(&wrong_cols), Err(Error::Parse { line: 2, .. })));

        let dup = format!("{ICD_CHAIN}ICD\tI25\t3\tI20-I25\t\n");
        assert!(matches!(parse(&dup), Err(Error::Parse { line: 7, .. })));

        let dangling = format!("{TAXONOMY_HEADER}\nICD\tI25\t3\tI20-I25\t\n");
        match parse(&dangling) {
            Err(Error::Parse { line: 2, message, .. }) => assert!(message.contains("dangling")),
            other => panic!("{other:?}"),
        }

        let ops_chapter1 = format!("{TAXONOMY_HEADER}\nOPS\t1-20...1-33\t2\t\t\n");
        match parse(&ops_chapter1) {
            Err(Error::Parse { line: 2, message, .. }) => assert!(message.contains("chapters")),
            other => panic!("{other:?}"),
        }

        let ops_level1 = format!("{TAXONOMY_HEADER}\nOPS\t8\t1\t\t\n");
        assert!(matches!(parse(&ops_level1), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn ops_chain_starts_at_level_two() {
        let src = format!(
            "{TAXONOMY_HEADER}\nOPS\t8-97...8-98\t2\t\t\nOPS\t8-98\t3\t8-97...8-98\t\nOPS\t8-980\t4\t8-98\t\nOPS\t8-980.1\t5\t8-980\t\n"
        );
        let tax = parse(&src).unwrap();
        let chain = tax.ancestors(CodeSystemId::Ops, "8-980.1").unwrap();
        let levels: Vec<u8> = chain.iter().map(|n| n.level).collect();
        assert_eq!(levels, [2, 3, 4, 5]);
    }

    #[test]
    fn unknown_code_lookup_names_system() {
        let tax = parse(ICD_CHAIN).unwrap();
        let err = tax.ancestors(CodeSystemId::Atc, "I25").unwrap_err();
        assert_eq!(err.to_string(), "unknown code ATC:I25");
    }

    #[test]
    fn write_then_read_is_identity() {
        let tax = parse(ICD_CHAIN).unwrap();
        let mut buf = Vec::new();
        tax.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), ICD_CHAIN);
    }

    #[test]
    fn descendants_depth_first() {
        let tax = parse(ICD_CHAIN).unwrap();
        let root = tax.position(CodeSystemId::Icd, "I20-I25").unwrap();
        let codes: Vec<_> = tax
            .descendant_positions(root)
            .into_iter()
            .map(|p| tax.node(p).code.clone())
            .collect();
        assert_eq!(codes, ["I25", "I25.2", "I25.22"]);
    }
}
