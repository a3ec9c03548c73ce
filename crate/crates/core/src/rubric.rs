//! Manual scoring criteria, composite scores, quality bands and the
//! contrast-to-clinical map.
//!
//! The criteria table is data, loaded from a versioned TOML document. The
//! built-in copy lives in `rubric.toml` next to this crate's manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const RUBRIC_VERSION: u32 = 1;
const DEFAULT_RUBRIC: &str = include_str!("../rubric.toml");

/// The four scored quality attributes, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    OnAxis,
    #[serde(rename = "LVClarity")]
    LvClarity,
    DepthGain,
    Foreshorten,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::OnAxis,
        Attribute::LvClarity,
        Attribute::DepthGain,
        Attribute::Foreshorten,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column heading used in accuracy tables.
    pub fn label(self) -> &'static str {
        match self {
            Attribute::OnAxis => "On-Axis",
            Attribute::LvClarity => "LV Clarity",
            Attribute::DepthGain => "Depth Gain",
            Attribute::Foreshorten => "Fore-Shortening",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Attribute::OnAxis => "OnAxis",
            Attribute::LvClarity => "LVClarity",
            Attribute::DepthGain => "DepthGain",
            Attribute::Foreshorten => "Foreshorten",
        }
    }

    pub fn parse(s: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.key() == s)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Apical view of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    A4C,
    A2C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Column {
    Poor,
    Average,
    Optimum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub poor: f64,
    pub average: f64,
    pub optimum: f64,
}

impl Criterion {
    pub fn column(&self, c: Column) -> f64 {
        match c {
            Column::Poor => self.poor,
            Column::Average => self.average,
            Column::Optimum => self.optimum,
        }
    }

    /// Highest value an annotator may give.
    pub fn ceiling(&self) -> f64 {
        self.optimum.max(self.average).max(self.poor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRubric {
    pub attribute: Attribute,
    pub criteria: Vec<Criterion>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub cap: f64,
    pub unsuitable_below: f64,
    pub poor_max: f64,
    pub average_max: f64,
}

/// Raw-contrast values that map to the optimum (9.0) and over-contrast (6.0)
/// clinical scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastAnchors {
    pub optimum: f64,
    pub over: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub version: u32,
    pub bands: Bands,
    pub contrast: BTreeMap<View, ContrastAnchors>,
    pub attributes: Vec<AttributeRubric>,
}

/// One entered criterion value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub attribute: Attribute,
    pub criterion: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityBand {
    Unsuitable,
    Poor,
    Average,
    Optimum,
}

impl QualityBand {
    /// Three-way grading used for dataset stratification: unsuitable clips
    /// count as poor.
    pub fn level(self) -> Column {
        match self {
            QualityBand::Unsuitable | QualityBand::Poor => Column::Poor,
            QualityBand::Average => Column::Average,
            QualityBand::Optimum => Column::Optimum,
        }
    }
}

impl Rubric {
    pub fn from_toml(text: &str) -> Result<Self> {
        let rubric: Rubric =
            toml::from_str(text).map_err(|e| Error::Rubric(format!("parse: {e}")))?;
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io(format!("reading {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("rubric always serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.version != RUBRIC_VERSION {
            return Err(Error::Rubric(format!(
                "unsupported rubric version {} (expected {RUBRIC_VERSION})",
                self.version
            )));
        }
        let b = self.bands;
        if !(b.unsuitable_below <= b.poor_max && b.poor_max <= b.average_max && b.average_max <= b.cap) {
            return Err(Error::Rubric("band thresholds must be increasing".into()));
        }
        for a in Attribute::ALL {
            let n = self.attributes.iter().filter(|r| r.attribute == a).count();
            if n != 1 {
                return Err(Error::Rubric(format!("{a} must appear exactly once, found {n}")));
            }
        }
        for r in &self.attributes {
            for c in &r.criteria {
                if c.poor < 0.0 || c.average < c.poor || c.optimum < c.average {
                    return Err(Error::Rubric(format!(
                        "{}: columns of {:?} must be nonnegative and nondecreasing",
                        r.attribute, c.name
                    )));
                }
            }
        }
        for (view, a) in &self.contrast {
            if a.optimum < 0.0 || a.over < a.optimum {
                return Err(Error::Rubric(format!(
                    "{view:?}: contrast anchors need 0 <= optimum <= over"
                )));
            }
        }
        Ok(())
    }

    pub fn criteria(&self, attribute: Attribute) -> &[Criterion] {
        &self
            .attributes
            .iter()
            .find(|r| r.attribute == attribute)
            .expect("validated rubric has every attribute")
            .criteria
    }

    pub fn criterion(&self, attribute: Attribute, name: &str) -> Option<&Criterion> {
        self.criteria(attribute).iter().find(|c| c.name == name)
    }

    /// Every criterion of `attribute` at the given Table column.
    pub fn column_scores(&self, attribute: Attribute, column: Column) -> Vec<CriterionScore> {
        self.criteria(attribute)
            .iter()
            .map(|c| CriterionScore {
                attribute,
                criterion: c.name.clone(),
                value: c.column(column),
            })
            .collect()
    }

    /// Criterion values along the column axis: `level` 0 is all zeros, 1 the
    /// poor column, 2 average, 3 optimum, linear in between.
    pub fn interpolate(&self, attribute: Attribute, level: f64) -> Vec<CriterionScore> {
        let level = level.clamp(0.0, 3.0);
        self.criteria(attribute)
            .iter()
            .map(|c| {
                let knots = [0.0, c.poor, c.average, c.optimum];
                let i = (level.floor() as usize).min(2);
                let t = level - i as f64;
                CriterionScore {
                    attribute,
                    criterion: c.name.clone(),
                    value: knots[i] + (knots[i + 1] - knots[i]) * t,
                }
            })
            .collect()
    }

    /// Checks entered values against the table: each name known, no
    /// duplicates, every value within `[0, ceiling]`. Returns one message per
    /// offending field.
    pub fn check_scores(&self, attribute: Attribute, scores: &[CriterionScore]) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = Vec::new();
        for s in scores {
            if s.attribute != attribute {
                problems.push(format!("{}: belongs to {}, not {attribute}", s.criterion, s.attribute));
                continue;
            }
            match self.criterion(attribute, &s.criterion) {
                None => problems.push(format!("{attribute}/{}: unknown criterion", s.criterion)),
                Some(c) => {
                    if !s.value.is_finite() || s.value < 0.0 || s.value > c.ceiling() {
                        problems.push(format!(
                            "{attribute}/{}: value {} outside [0, {}]",
                            s.criterion,
                            s.value,
                            c.ceiling()
                        ));
                    }
                }
            }
            if seen.contains(&&s.criterion) {
                problems.push(format!("{attribute}/{}: given more than once", s.criterion));
            }
            seen.push(&s.criterion);
        }
        for c in self.criteria(attribute) {
            if !scores.iter().any(|s| s.attribute == attribute && s.criterion == c.name) {
                problems.push(format!("{attribute}/{}: missing", c.name));
            }
        }
        problems
    }

    /// Sum of the criterion values, capped at the rubric maximum.
    pub fn composite_score(&self, attribute: Attribute, scores: &[CriterionScore]) -> Result<f64> {
        let problems = self.check_scores(attribute, scores);
        if !problems.is_empty() {
            return Err(Error::Rubric(problems.join("; ")));
        }
        Ok(scores.iter().map(|s| s.value).sum::<f64>().min(self.bands.cap))
    }

    pub fn normalize_score(&self, raw: f64) -> Result<f64> {
        if !(0.0..=self.bands.cap).contains(&raw) {
            return Err(Error::Invalid(format!(
                "raw score {raw} outside [0, {}]",
                self.bands.cap
            )));
        }
        Ok(raw / self.bands.cap)
    }

    pub fn quality_band(&self, raw: f64) -> QualityBand {
        let b = self.bands;
        if raw < b.unsuitable_below {
            QualityBand::Unsuitable
        } else if raw <= b.poor_max {
            QualityBand::Poor
        } else if raw <= b.average_max {
            QualityBand::Average
        } else {
            QualityBand::Optimum
        }
    }

    pub fn anchors(&self, view: View) -> Result<ContrastAnchors> {
        self.contrast
            .get(&view)
            .copied()
            .ok_or_else(|| Error::Rubric(format!("no contrast anchors for {view:?}")))
    }

    pub fn score(&self, raw: f64) -> Result<AttributeScore> {
        Ok(AttributeScore {
            raw,
            normalized: self.normalize_score(raw)?,
            band: self.quality_band(raw),
        })
    }

    pub fn scores(&self, raw: [f64; 4]) -> Result<AttributeScores> {
        let mut out = [AttributeScore::default(); 4];
        for (o, r) in out.iter_mut().zip(raw) {
            *o = self.score(r)?;
        }
        Ok(AttributeScores(out))
    }

    /// Scores from normalized values, e.g. model outputs.
    pub fn scores_from_normalized(&self, normalized: [f64; 4]) -> Result<AttributeScores> {
        self.scores(normalized.map(|n| n * self.bands.cap))
    }
}

impl Default for Rubric {
    fn default() -> Self {
        Rubric::from_toml(DEFAULT_RUBRIC).expect("built-in rubric is valid")
    }
}

/// Clinical score for a raw contrast value.
///
/// Linear from 0 at zero contrast to 9.0 at the optimum anchor (so half the
/// optimum contrast scores 4.5), then down to 6.0 at the over-contrast anchor,
/// flat beyond.
pub fn contrast_to_clinical(raw_contrast: f64, anchors: ContrastAnchors) -> f64 {
    let x = raw_contrast.max(0.0);
    let score = if x <= anchors.optimum {
        if anchors.optimum > 0.0 {
            9.0 * x / anchors.optimum
        } else {
            9.0
        }
    } else if x <= anchors.over {
        9.0 - 3.0 * (x - anchors.optimum) / (anchors.over - anchors.optimum)
    } else {
        6.0
    };
    score.clamp(0.0, 9.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub raw: f64,
    pub normalized: f64,
    pub band: QualityBand,
}

impl Default for AttributeScore {
    fn default() -> Self {
        Self {
            raw: 0.0,
            normalized: 0.0,
            band: QualityBand::Unsuitable,
        }
    }
}

/// One score per attribute, indexed by [`Attribute::index`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributeScores(pub [AttributeScore; 4]);

impl AttributeScores {
    pub fn get(&self, a: Attribute) -> AttributeScore {
        self.0[a.index()]
    }

    pub fn normalized(&self) -> [f64; 4] {
        self.0.map(|s| s.normalized)
    }

    pub fn raw(&self) -> [f64; 4] {
        self.0.map(|s| s.raw)
    }
}

impl Serialize for AttributeScores {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, AttributeScore> =
            Attribute::ALL.iter().map(|a| (a.key(), self.get(*a))).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttributeScores {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, AttributeScore>::deserialize(d)?;
        let mut out = [AttributeScore::default(); 4];
        for a in Attribute::ALL {
            out[a.index()] = *map
                .get(a.key())
                .ok_or_else(|| serde::de::Error::custom(format!("missing {a}")))?;
        }
        Ok(AttributeScores(out))
    }
}
