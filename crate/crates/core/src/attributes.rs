//! Attribute annotations: schema, per-observation records, and the appearance
//! probabilities that drive Refined Selecting.
//!
//! Annotation files are JSON Lines, one `{"id", "cam", "attrs"}` object per
//! line. Schemas are a single JSON document listing categories in caption
//! order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Fixed for a person across every capture.
    Identity,
    /// Varies per capture (viewpoint, weather, illumination, background).
    Scene,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub level: Level,
    pub values: Vec<String>,
}

impl Category {
    pub fn new(name: &str, level: Level, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            level,
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub categories: Vec<Category>,
}

/// One problem found by [`validate_schema`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaViolation {
    DuplicateCategory(String),
    TooFewValues { category: String, count: usize },
    DuplicateValue { category: String, value: String },
}

impl std::fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchemaViolation::DuplicateCategory(name) => write!(f, "duplicate category `{name}`"),
            SchemaViolation::TooFewValues { category, count } => {
                write!(f, "category `{category}` has {count} values, need at least 2")
            }
            SchemaViolation::DuplicateValue { category, value } => {
                write!(f, "category `{category}` lists `{value}` twice")
            }
        }
    }
}

/// Reports every structural problem in a schema; an empty list means valid.
pub fn validate_schema(schema: &AttributeSchema) -> Vec<SchemaViolation> {
    let mut report = Vec::new();
    let mut names = HashSet::new();
    for cat in &schema.categories {
        if !names.insert(cat.name.as_str()) {
            report.push(SchemaViolation::DuplicateCategory(cat.name.clone()));
        }
        if cat.values.len() < 2 {
            report.push(SchemaViolation::TooFewValues {
                category: cat.name.clone(),
                count: cat.values.len(),
            });
        }
        let mut seen = HashSet::new();
        for v in &cat.values {
            if !seen.insert(v.as_str()) {
                report.push(SchemaViolation::DuplicateValue {
                    category: cat.name.clone(),
                    value: v.clone(),
                });
            }
        }
    }
    report
}

impl AttributeSchema {
    pub fn category(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Fails with the first violation, if any.
    pub fn ensure_valid(&self) -> Result<()> {
        match validate_schema(self).first() {
            Some(v) => Err(Error::InvalidSchema(v.to_string())),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: AttributeSchema = serde_json::from_str(&text)?;
        schema.ensure_valid()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks that `record` names every category exactly once with a known value.
    pub fn check_record(&self, record: &AttributeRecord) -> std::result::Result<(), String> {
        for (name, value) in &record.values {
            let cat = self
                .category(name)
                .ok_or_else(|| format!("unknown category `{name}`"))?;
            if cat.value_index(value).is_none() {
                return Err(format!("value `{value}` is not allowed for category `{name}`"));
            }
        }
        for cat in &self.categories {
            if !record.values.contains_key(&cat.name) {
                return Err(format!("missing category `{}`", cat.name));
            }
        }
        Ok(())
    }
}

/// One identity observed by one camera.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRecord {
    #[serde(rename = "id")]
    pub identity_id: u64,
    #[serde(rename = "cam")]
    pub camera_id: u64,
    #[serde(rename = "attrs")]
    pub values: BTreeMap<String, String>,
}

impl AttributeRecord {
    pub fn value(&self, category: &str) -> Option<&str> {
        self.values.get(category).map(String::as_str)
    }
}

pub fn parse_annotations<R: BufRead>(reader: R, schema: &AttributeSchema) -> Result<Vec<AttributeRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AttributeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        schema
            .check_record(&record)
            .map_err(|message| Error::SchemaViolation { line: lineno, message })?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_annotations(path: &Path, schema: &AttributeSchema) -> Result<Vec<AttributeRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(BufReader::new(file), schema)
}

pub fn write_annotations<W: Write>(mut out: W, records: &[AttributeRecord]) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn save_annotations(path: &Path, records: &[AttributeRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_annotations(&mut buf, records).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// How scene-level attributes are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneUnit {
    /// Distinct (identity, camera) observations.
    #[default]
    Observation,
    /// Distinct identities, same as identity-level categories.
    Identity,
}

/// Appearance probability of every (category, value) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub probabilities: BTreeMap<String, BTreeMap<String, f64>>,
    pub id_count: usize,
}

impl FrequencyTable {
    pub fn probability(&self, category: &str, value: &str) -> Option<f64> {
        self.probabilities.get(category)?.get(value).copied()
    }
}

/// Counts attribute values over distinct identities (identity level) or
/// distinct observations (scene level, see [`SceneUnit`]).
pub fn attribute_frequencies(
    records: &[AttributeRecord],
    schema: &AttributeSchema,
    scene_unit: SceneUnit,
) -> Result<FrequencyTable> {
    if records.is_empty() {
        return Err(Error::EmptyInput("attribute_frequencies needs at least one record"));
    }
    let identities: BTreeSet<u64> = records.iter().map(|r| r.identity_id).collect();

    let mut probabilities = BTreeMap::new();
    for cat in &schema.categories {
        // unit key -> value; a unit holding two values counts once per value
        let mut units: BTreeSet<(u64, u64, &str)> = BTreeSet::new();
        let mut identity_value: BTreeMap<u64, &str> = BTreeMap::new();
        for r in records {
            let value = r
                .value(&cat.name)
                .ok_or_else(|| Error::Template(format!("record of identity {} lacks `{}`", r.identity_id, cat.name)))?;
            match (cat.level, scene_unit) {
                (Level::Identity, _) => {
                    if let Some(prev) = identity_value.insert(r.identity_id, value) {
                        if prev != value {
                            return Err(Error::Consistency {
                                identity: r.identity_id,
                                category: cat.name.clone(),
                            });
                        }
                    }
                    units.insert((r.identity_id, 0, value));
                }
                (Level::Scene, SceneUnit::Observation) => {
                    units.insert((r.identity_id, r.camera_id, value));
                }
                (Level::Scene, SceneUnit::Identity) => {
                    units.insert((r.identity_id, 0, value));
                }
            }
        }
        let total = units.len() as f64;
        let mut per_value: BTreeMap<String, f64> = cat.values.iter().map(|v| (v.clone(), 0.0)).collect();
        for (_, _, v) in &units {
            *per_value.entry(v.to_string()).or_insert(0.0) += 1.0;
        }
        for p in per_value.values_mut() {
            *p /= total;
        }
        probabilities.insert(cat.name.clone(), per_value);
    }
    Ok(FrequencyTable {
        probabilities,
        id_count: identities.len(),
    })
}
