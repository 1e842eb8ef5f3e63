//! Person-level records: loading, default filling and imputation of the
//! regional-incidence predictor.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::CodeSystemId;

/// Nested binary outcomes: `Y3 ⊆ Y2 ⊆ Y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Outcome {
    #[serde(rename = "y1")]
    Y1,
    #[default]
    #[serde(rename = "y2")]
    Y2,
    #[serde(rename = "y3")]
    Y3,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Y1, Outcome::Y2, Outcome::Y3];

    pub fn of(self, record: &PersonRecord) -> bool {
        match self {
            Outcome::Y1 => record.y1,
            Outcome::Y2 => record.y2,
            Outcome::Y3 => record.y3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Y1 => "y1",
            Outcome::Y2 => "y2",
            Outcome::Y3 => "y3",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "y1" => Ok(Outcome::Y1),
            "y2" => Ok(Outcome::Y2),
            "y3" => Ok(Outcome::Y3),
            other => Err(format!("unknown outcome `{other}` (expected y1, y2 or y3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub id: String,
    pub categorical: BTreeMap<String, String>,
    pub region: Option<String>,
    pub event_date: Option<NaiveDate>,
    /// 7-day incidence per 100k at the person's reference date.
    pub incidence: Option<f64>,
    pub codes: Vec<(CodeSystemId, String)>,
    pub y1: bool,
    pub y2: bool,
    pub y3: bool,
    /// Date drawn for non-outcome persons during incidence imputation.
    pub reference_date: Option<NaiveDate>,
}

impl PersonRecord {
    pub fn new(id: impl Into<String>) -> Self {
        PersonRecord {
            id: id.into(),
            categorical: BTreeMap::new(),
            region: None,
            event_date: None,
            incidence: None,
            codes: Vec::new(),
            y1: false,
            y2: false,
            y3: false,
            reference_date: None,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.y3 && !self.y2 {
            return Err(format!("record {}: y3 = 1 requires y2 = 1", self.id));
        }
        if self.y2 && !self.y1 {
            return Err(format!("record {}: y2 = 1 requires y1 = 1", self.id));
        }
        if let Some(v) = self.incidence {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("record {}: incidence {v} must be finite and >= 0", self.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default)]
    categorical: BTreeMap<String, Option<String>>,
    #[serde(default)]
    region: Option<String>,
    #[serde(default)]
    event_date: Option<NaiveDate>,
    #[serde(default)]
    incidence: Option<f64>,
    #[serde(default)]
    codes: Vec<(String, String)>,
    y1: u8,
    y2: u8,
    y3: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_date: Option<NaiveDate>,
}

impl From<&PersonRecord> for RawRecord {
    fn from(r: &PersonRecord) -> Self {
        RawRecord {
            id: r.id.clone(),
            categorical: r
                .categorical
                .iter()
                .map(|(k, v)| (k.clone(), Some(v.clone())))
                .collect(),
            region: r.region.clone(),
            event_date: r.event_date,
            incidence: r.incidence,
            codes: r.codes.iter().map(|(s, c)| (s.to_string(), c.clone())).collect(),
            y1: r.y1 as u8,
            y2: r.y2 as u8,
            y3: r.y3 as u8,
            reference_date: r.reference_date,
        }
    }
}

/// An ordered, validated set of person records.
#[derive(Debug, Clone, Default)]
pub struct Cohort {
    records: Vec<PersonRecord>,
    dictionary: BTreeMap<String, BTreeSet<String>>,
}

impl Cohort {
    /// Validates id uniqueness and outcome nesting, and collects the
    /// per-feature category dictionary.
    pub fn new(records: Vec<PersonRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut dictionary: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Cohort(format!("duplicate id {}", r.id)));
            }
            r.check().map_err(Error::Cohort)?;
            for (k, v) in &r.categorical {
                dictionary.entry(k.clone()).or_default().insert(v.clone());
            }
        }
        Ok(Cohort { records, dictionary })
    }

    /// Reads cohort JSONL. Missing or null categorical values are replaced by
    /// `defaults`; a missing value without a default rejects the record.
    pub fn read<R: Read>(reader: R, source_name: &str, defaults: &BTreeMap<String, String>) -> Result<Self> {
        let reader = BufReader::new(reader);
        let mut raw = Vec::new();
        let mut features: BTreeSet<String> = defaults.keys().cloned().collect();
        let mut ids: HashMap<String, usize> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RawRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(source_name, lineno, format!("malformed record: {e}")))?;
            if let Some(first) = ids.insert(rec.id.clone(), lineno) {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("duplicate id {} (first seen on line {first})", rec.id),
                ));
            }
            features.extend(rec.categorical.keys().cloned());
            raw.push((lineno, rec));
        }

        let mut records = Vec::with_capacity(raw.len());
        for (lineno, rec) in raw {
            let mut categorical = BTreeMap::new();
            for f in &features {
                let value = rec.categorical.get(f).cloned().flatten();
                let value = match value.or_else(|| defaults.get(f).cloned()) {
                    Some(v) => v,
                    None => {
                        return Err(Error::parse(
                            source_name,
                            lineno,
                            format!("record {} lacks `{f}` and no default is configured", rec.id),
                        ))
                    }
                };
                categorical.insert(f.clone(), value);
            }
            let mut codes = Vec::with_capacity(rec.codes.len());
            for (sys, code) in rec.codes {
                let sys = CodeSystemId::from_str(&sys).map_err(|e| Error::parse(source_name, lineno, e))?;
                codes.push((sys, code));
            }
            for (name, v) in [("y1", rec.y1), ("y2", rec.y2), ("y3", rec.y3)] {
                if v > 1 {
                    return Err(Error::parse(
                        source_name,
                        lineno,
                        format!("{name} must be 0 or 1, found {v}"),
                    ));
                }
            }
            let record = PersonRecord {
                id: rec.id,
                categorical,
                region: rec.region,
                event_date: rec.event_date,
                incidence: rec.incidence,
                codes,
                y1: rec.y1 == 1,
                y2: rec.y2 == 1,
                y3: rec.y3 == 1,
                reference_date: rec.reference_date,
            };
            record.check().map_err(|m| Error::parse(source_name, lineno, m))?;
            records.push(record);
        }
        Cohort::new(records)
    }

    pub fn load(path: impl AsRef<Path>, defaults: &BTreeMap<String, String>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file, &path.display().to_string(), defaults)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, &RawRecord::from(r))?;
            out.write_all(b"\n").map_err(|e| Error::io("<cohort writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[PersonRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dictionary(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.dictionary
    }

    pub fn labels(&self, outcome: Outcome) -> Vec<u8> {
        self.records.iter().map(|r| outcome.of(r) as u8).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Keeps the records for which `keep` returns true, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&PersonRecord) -> bool) -> Cohort {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Cohort::new(records).expect("subset of a valid cohort is valid")
    }

    pub fn into_records(self) -> Vec<PersonRecord> {
        self.records
    }
}

/// Regional 7-day incidence by calendar date.
#[derive(Debug, Clone, Default)]
pub struct IncidenceSeries {
    values: HashMap<(String, NaiveDate), f64>,
}

impl IncidenceSeries {
    pub fn insert(&mut self, region: &str, date: NaiveDate, incidence: f64) {
        self.values.insert((region.to_string(), date), incidence);
    }

    pub fn get(&self, region: &str, date: NaiveDate) -> Option<f64> {
        self.values.get(&(region.to_string(), date)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reads `region,date,incidence` CSV.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            region: String,
            date: NaiveDate,
            incidence: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut series = IncidenceSeries::default();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if !row.incidence.is_finite() || row.incidence < 0.0 {
                return Err(Error::Incidence(format!(
                    "series value {} at ({}, {}) must be finite and >= 0",
                    row.incidence, row.region, row.date
                )));
            }
            series.insert(&row.region, row.date, row.incidence);
        }
        Ok(series)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }
}

/// Fills missing incidence values.
///
/// Persons with the outcome are looked up at their event date. Everyone else
/// gets a reference date drawn uniformly (seeded, in cohort order) from the
/// outcome persons' event dates, and is looked up there. Records that already
/// carry an incidence value are untouched.
pub fn impute_reference_incidence(
    cohort: &Cohort,
    series: &IncidenceSeries,
    outcome: Outcome,
    seed: u64,
) -> Result<Cohort> {
    let dates: Vec<NaiveDate> = cohort
        .records
        .iter()
        .filter(|r| outcome.of(r))
        .filter_map(|r| r.event_date)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let lookup = |r: &PersonRecord, date: NaiveDate| -> Result<f64> {
        let region = r
            .region
            .as_deref()
            .ok_or_else(|| Error::Incidence(format!("record {} has no region", r.id)))?;
        series
            .get(region, date)
            .ok_or_else(|| Error::Incidence(format!("no incidence for region {region} on {date} (record {})", r.id)))
    };

    let mut records = Vec::with_capacity(cohort.len());
    for r in &cohort.records {
        let mut r = r.clone();
        if r.incidence.is_none() {
            if outcome.of(&r) {
                let date = r
                    .event_date
                    .ok_or_else(|| Error::Incidence(format!("outcome record {} has no event date", r.id)))?;
                r.incidence = Some(lookup(&r, date)?);
            } else {
                if dates.is_empty() {
                    return Err(Error::Incidence(format!(
                        "no {outcome} event dates available to sample a reference date"
                    )));
                }
                let date = dates[rng.random_range(0..dates.len())];
                r.reference_date = Some(date);
                r.incidence = Some(lookup(&r, date)?);
            }
        }
        records.push(r);
    }
    Cohort::new(records)
}
