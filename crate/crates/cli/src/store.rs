//! Append-only annotation log, one JSON record per line.
//!
//! Records are never rewritten. A corrected annotation is a new record whose
//! `revises` field points at the annotator's previous record for the clip.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use echoqa::rubric::{Attribute, CriterionScore, Rubric};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Position in the log, starting at 1.
    pub id: u64,
    #[serde(default)]
    pub revises: Option<u64>,
    pub annotator: String,
    pub clip: String,
    pub criteria: Vec<CriterionScore>,
    /// Raw composite per scored attribute, recomputed from `criteria`.
    pub composites: BTreeMap<Attribute, f64>,
    pub timestamp_ms: u64,
}

/// A submitted annotation before it is checked.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub annotator: String,
    pub criteria: Vec<RawCriterion>,
    /// Composites the client computed. When present they must match the
    /// server's.
    #[serde(default)]
    pub composites: Option<BTreeMap<String, f64>>,
}

/// A criterion value with its attribute still unparsed, so that unknown
/// attribute names come back as field errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawCriterion {
    pub attribute: String,
    pub criterion: String,
    pub value: f64,
}

#[derive(Debug)]
pub enum StoreError {
    /// One message per offending field.
    Invalid(Vec<String>),
    Io(String),
}

impl std::fmt::Display for StoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoreError::Invalid(fields) => write!(f, "invalid annotation: {}", fields.join("; ")),
            StoreError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for StoreError {}

pub fn valid_annotator(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Validates a request against the rubric and returns the criteria grouped
/// by attribute together with their composites. Every attribute that appears
/// must have all of its criteria.
pub fn check_request(
    rubric: &Rubric,
    req: &AnnotationRequest,
) -> Result<(Vec<CriterionScore>, BTreeMap<Attribute, f64>), StoreError> {
    let mut problems = Vec::new();
    if !valid_annotator(&req.annotator) {
        problems.push(format!("annotator: {:?} is not a plain identifier", req.annotator));
    }
    let mut by_attr: BTreeMap<Attribute, Vec<CriterionScore>> = BTreeMap::new();
    for c in &req.criteria {
        match Attribute::parse(&c.attribute) {
            Some(a) => by_attr.entry(a).or_default().push(CriterionScore {
                attribute: a,
                criterion: c.criterion.clone(),
                value: c.value,
            }),
            None => problems.push(format!("{}/{}: unknown attribute", c.attribute, c.criterion)),
        }
    }
    if req.criteria.is_empty() {
        problems.push("criteria: empty".into());
    }
    let mut composites = BTreeMap::new();
    for (a, scores) in &by_attr {
        let p = rubric.check_scores(*a, scores);
        if p.is_empty() {
            composites.insert(*a, rubric.composite_score(*a, scores).expect("checked"));
        }
        problems.extend(p);
    }
    if let Some(client) = &req.composites {
        for (name, value) in client {
            match Attribute::parse(name).and_then(|a| composites.get(&a).map(|v| (a, *v))) {
                Some((_, server)) if server == *value => {}
                Some((a, server)) => problems.push(format!(
                    "composites/{a}: client computed {value}, server computed {server}"
                )),
                None if by_attr.keys().any(|a| Some(*a) == Attribute::parse(name)) => {}
                None => problems.push(format!("composites/{name}: no criteria given for this attribute")),
            }
        }
    }
    if !problems.is_empty() {
        return Err(StoreError::Invalid(problems));
    }
    Ok((by_attr.into_values().flatten().collect(), composites))
}

struct Writer {
    file: File,
}

pub struct AnnotationStore {
    path: PathBuf,
    writer: Mutex<Writer>,
    records: RwLock<Vec<AnnotationRecord>>,
}

impl AnnotationStore {
    /// Opens (creating if needed) the log at `path`. Every stored record is
    /// re-scored; a composite that disagrees with the rubric fails the open.
    /// A torn final line left by a crash mid-append is cut off.
    pub fn open(path: impl AsRef<Path>, rubric: &Rubric) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let ioerr = |e: std::io::Error| StoreError::Io(format!("{}: {e}", path.display()));
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(ioerr)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(ioerr)?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            file.set_len(complete as u64).map_err(ioerr)?;
            file.sync_all().map_err(ioerr)?;
        }
        file.seek(SeekFrom::End(0)).map_err(ioerr)?;
        let mut records: Vec<AnnotationRecord> = Vec::new();
        for (n, line) in text[..complete].lines().enumerate() {
            let rec: AnnotationRecord = serde_json::from_str(line)
                .map_err(|e| StoreError::Io(format!("{} line {}: {e}", path.display(), n + 1)))?;
            if rec.id != records.len() as u64 + 1 {
                return Err(StoreError::Io(format!(
                    "{} line {}: record id {} out of sequence",
                    path.display(),
                    n + 1,
                    rec.id
                )));
            }
            let recomputed = recompute(rubric, &rec.criteria)
                .map_err(|p| StoreError::Io(format!("{} record {}: {}", path.display(), rec.id, p.join("; "))))?;
            if recomputed != rec.composites {
                return Err(StoreError::Io(format!(
                    "{} record {}: stored composites disagree with the rubric",
                    path.display(),
                    rec.id
                )));
            }
            records.push(rec);
        }
        Ok(Self {
            path,
            writer: Mutex::new(Writer { file }),
            records: RwLock::new(records),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates and durably appends. The record is visible to readers only
    /// after the write has been synced.
    pub fn append(&self, rubric: &Rubric, clip: &str, req: &AnnotationRequest) -> Result<AnnotationRecord, StoreError> {
        let (criteria, composites) = check_request(rubric, req)?;
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let (id, revises) = {
            let records = self.records.read().unwrap_or_else(|e| e.into_inner());
            let prev = records
                .iter()
                .rev()
                .find(|r| r.clip == clip && r.annotator == req.annotator)
                .map(|r| r.id);
            (records.len() as u64 + 1, prev)
        };
        let rec = AnnotationRecord {
            id,
            revises,
            annotator: req.annotator.clone(),
            clip: clip.to_string(),
            criteria,
            composites,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let ioerr = |e: std::io::Error| StoreError::Io(format!("{}: {e}", self.path.display()));
        w.file.write_all(line.as_bytes()).map_err(ioerr)?;
        w.file.sync_data().map_err(ioerr)?;
        self.records.write().unwrap_or_else(|e| e.into_inner()).push(rec.clone());
        Ok(rec)
    }

    pub fn all(&self) -> Vec<AnnotationRecord> {
        self.records.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn for_clip(&self, clip: &str) -> Vec<AnnotationRecord> {
        self.records
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|r| r.clip == clip)
            .cloned()
            .collect()
    }

    /// Latest raw composite per (clip, attribute) from one annotator,
    /// following revisions.
    pub fn latest(&self, annotator: &str) -> BTreeMap<(String, Attribute), f64> {
        let mut out = BTreeMap::new();
        for r in self.records.read().unwrap_or_else(|e| e.into_inner()).iter() {
            if r.annotator == annotator {
                for (a, v) in &r.composites {
                    out.insert((r.clip.clone(), *a), *v);
                }
            }
        }
        out
    }
}

fn recompute(rubric: &Rubric, criteria: &[CriterionScore]) -> Result<BTreeMap<Attribute, f64>, Vec<String>> {
    let mut by_attr: BTreeMap<Attribute, Vec<CriterionScore>> = BTreeMap::new();
    for c in criteria {
        by_attr.entry(c.attribute).or_default().push(c.clone());
    }
    let mut out = BTreeMap::new();
    for (a, scores) in by_attr {
        let value = rubric
            .composite_score(a, &scores)
            .map_err(|e| vec![e.to_string()])?;
        out.insert(a, value);
    }
    Ok(out)
}
