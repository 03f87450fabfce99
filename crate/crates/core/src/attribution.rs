//! Checks whether a token subset is a shortcut for a classifier, given
//! predictions and per-token attribution vectors computed elsewhere.
//!
//! A subset is a shortcut when the classifier's prediction on the subset
//! alone equals its prediction on the whole document, that prediction is
//! wrong, and the subset is no larger than its complement. For shortcuts the
//! per-token attribution mass of the subset is expected to be at least that
//! of the complement; [`lemma1_holds`] tests that inequality on a record.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClassId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error("record `{doc_id}`: position {position} out of range for {len} tokens")]
    PositionOutOfRange {
        doc_id: String,
        position: usize,
        len: usize,
    },
    #[error("record `{doc_id}`: subset is empty")]
    EmptySubset { doc_id: String },
    #[error("record `{doc_id}`: subset covers every token, complement is empty")]
    EmptyComplement { doc_id: String },
    #[error("record `{doc_id}`: no prediction recorded for subset {positions:?}")]
    MissingSubsetPrediction { doc_id: String, positions: Vec<usize> },
    #[error("record `{doc_id}`: attribution vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        doc_id: String,
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record `{doc_id}`: no attribution vectors")]
    NoAttributions { doc_id: String },
    #[error("record `{doc_id}`: token count {found} does not match document length {expected}")]
    LengthMismatch {
        doc_id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{0}")]
    Io(String),
}

/// Classifier prediction on a named token subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPrediction {
    pub positions: Vec<usize>,
    pub predicted: ClassId,
}

/// Per-document evidence: one attribution vector per token position plus
/// the predictions needed to evaluate the shortcut conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub doc_id: String,
    #[serde(rename = "attributions")]
    pub token_attributions: Vec<Vec<f64>>,
    pub predicted_full: ClassId,
    pub true_label: ClassId,
    #[serde(default)]
    pub subsets: Vec<SubsetPrediction>,
}

impl AttributionRecord {
    /// Checks that there is at least one vector and all share a dimension.
    pub fn validate(&self) -> Result<(), AttributionError> {
        let first = self
            .token_attributions
            .first()
            .ok_or_else(|| AttributionError::NoAttributions {
                doc_id: self.doc_id.clone(),
            })?;
        let expected = first.len();
        if expected == 0 {
            return Err(AttributionError::DimensionMismatch {
                doc_id: self.doc_id.clone(),
                index: 0,
                expected: 1,
                found: 0,
            });
        }
        for (index, v) in self.token_attributions.iter().enumerate() {
            if v.len() != expected {
                return Err(AttributionError::DimensionMismatch {
                    doc_id: self.doc_id.clone(),
                    index,
                    expected,
                    found: v.len(),
                });
            }
        }
        for subset in &self.subsets {
            self.positions(&subset.positions)?;
        }
        Ok(())
    }

    /// Validates against the document the attributions were computed for.
    pub fn validate_length(&self, token_count: usize) -> Result<(), AttributionError> {
        if self.token_attributions.len() != token_count {
            return Err(AttributionError::LengthMismatch {
                doc_id: self.doc_id.clone(),
                expected: token_count,
                found: self.token_attributions.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_attributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_attributions.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.token_attributions.first().map_or(0, Vec::len)
    }

    fn positions(&self, subset: &[usize]) -> Result<BTreeSet<usize>, AttributionError> {
        let len = self.len();
        subset
            .iter()
            .map(|&position| {
                if position < len {
                    Ok(position)
                } else {
                    Err(AttributionError::PositionOutOfRange {
                        doc_id: self.doc_id.clone(),
                        position,
                        len,
                    })
                }
            })
            .collect()
    }

    fn complement(&self, subset: &BTreeSet<usize>) -> Vec<usize> {
        (0..self.len()).filter(|p| !subset.contains(p)).collect()
    }

    /// Prediction recorded for `subset`, matched as a set of positions.
    pub fn subset_prediction(&self, subset: &[usize]) -> Option<ClassId> {
        let wanted: BTreeSet<usize> = subset.iter().copied().collect();
        self.subsets
            .iter()
            .find(|s| s.positions.iter().copied().collect::<BTreeSet<_>>() == wanted)
            .map(|s| s.predicted)
    }
}

/// L2 norm of the summed attribution vectors at `subset`. Zero for the
/// empty subset. Repeated positions count once.
pub fn attribution_mass(subset: &[usize], record: &AttributionRecord) -> Result<f64, AttributionError> {
    let positions = record.positions(subset)?;
    Ok(mass_of(positions.iter().copied(), record))
}

fn mass_of(positions: impl Iterator<Item = usize>, record: &AttributionRecord) -> f64 {
    let mut sum = vec![0.0; record.dimension()];
    for p in positions {
        for (acc, v) in sum.iter_mut().zip(&record.token_attributions[p]) {
            *acc += v;
        }
    }
    sum.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-token attribution mass of a subset and of its complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassComparison {
    pub subset_mass: f64,
    pub subset_size: usize,
    pub complement_mass: f64,
    pub complement_size: usize,
}

impl MassComparison {
    pub fn holds(&self) -> bool {
        self.subset_mass / self.subset_size as f64 >= self.complement_mass / self.complement_size as f64
    }
}

pub fn compare_masses(subset: &[usize], record: &AttributionRecord) -> Result<MassComparison, AttributionError> {
    let positions = record.positions(subset)?;
    if positions.is_empty() {
        return Err(AttributionError::EmptySubset {
            doc_id: record.doc_id.clone(),
        });
    }
    let complement = record.complement(&positions);
    if complement.is_empty() {
        return Err(AttributionError::EmptyComplement {
            doc_id: record.doc_id.clone(),
        });
    }
    Ok(MassComparison {
        subset_mass: mass_of(positions.iter().copied(), record),
        subset_size: positions.len(),
        complement_mass: mass_of(complement.iter().copied(), record),
        complement_size: complement.len(),
    })
}

/// `H(subset)/|subset| >= H(complement)/|complement|`.
pub fn lemma1_holds(subset: &[usize], record: &AttributionRecord) -> Result<bool, AttributionError> {
    Ok(compare_masses(subset, record)?.holds())
}

/// Shortcut condition that failed first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutCondition {
    /// Subset prediction differs from the full-document prediction.
    PredictionNotPreserved,
    /// Full-document prediction equals the true label.
    PredictionCorrect,
    /// Subset has more tokens than its complement.
    SubsetTooLarge,
}

impl fmt::Display for ShortcutCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShortcutCondition::PredictionNotPreserved => "subset prediction differs from full prediction",
            ShortcutCondition::PredictionCorrect => "full prediction matches the true label",
            ShortcutCondition::SubsetTooLarge => "subset is larger than its complement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShortcutVerdict {
    pub is_shortcut: bool,
    pub failed: Option<ShortcutCondition>,
}

/// Evaluates the three shortcut conditions in order and reports the first
/// one that fails.
pub fn is_shortcut(subset: &[usize], record: &AttributionRecord) -> Result<ShortcutVerdict, AttributionError> {
    let positions = record.positions(subset)?;
    let predicted_subset =
        record
            .subset_prediction(subset)
            .ok_or_else(|| AttributionError::MissingSubsetPrediction {
                doc_id: record.doc_id.clone(),
                positions: positions.iter().copied().collect(),
            })?;
    let failed = if predicted_subset != record.predicted_full {
        Some(ShortcutCondition::PredictionNotPreserved)
    } else if record.predicted_full == record.true_label {
        Some(ShortcutCondition::PredictionCorrect)
    } else if positions.len() > record.len() - positions.len() {
        Some(ShortcutCondition::SubsetTooLarge)
    } else {
        None
    };
    Ok(ShortcutVerdict {
        is_shortcut: failed.is_none(),
        failed,
    })
}

/// Reads one [`AttributionRecord`] per non-blank line; every record is validated.
pub fn load_attributions(path: impl AsRef<Path>) -> Result<Vec<AttributionRecord>, AttributionError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AttributionError::Io(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AttributionError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AttributionRecord = serde_json::from_str(&line).map_err(|e| AttributionError::Malformed {
            line: index + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| AttributionError::Malformed {
            line: index + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
