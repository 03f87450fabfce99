//! Labeled document model, tokenization and JSON-Lines I/O.
//!
//! Three record layouts are supported. In every layout one field is the
//! rewritable text that gets tokenized and scored, and an optional second
//! field is carried through untouched:
//!
//! | schema               | mutable text  | context      |
//! |----------------------|---------------|--------------|
//! | `single`             | `text`        | none         |
//! | `claim_evidence`     | `claim`       | `evidence`   |
//! | `premise_hypothesis` | `hypothesis`  | `premise`    |

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class identifier. Small non-negative integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: missing required field `{field}` for schema {schema}")]
    MissingField {
        line: usize,
        field: &'static str,
        schema: Schema,
    },
    #[error("line {line}: unknown label {label}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate document id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: document `{id}` has no tokens after normalization")]
    EmptyDocument { line: usize, id: String },
    #[error("document `{0}` has no tokens after normalization")]
    EmptyText(String),
    #[error("duplicate document id `{0}`")]
    DuplicateDocumentId(String),
    #[error("label {0} is not in the label set")]
    LabelNotDeclared(ClassId),
    #[error("dataset needs at least 2 distinct labels, found {0}")]
    TooFewLabels(usize),
    #[error("unknown schema `{0}` (expected single, claim_evidence or premise_hypothesis)")]
    UnknownSchema(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
}

/// Record layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Single,
    ClaimEvidence,
    PremiseHypothesis,
}

impl Schema {
    pub fn as_str(self) -> &'static str {
        match self {
            Schema::Single => "single",
            Schema::ClaimEvidence => "claim_evidence",
            Schema::PremiseHypothesis => "premise_hypothesis",
        }
    }

    fn mutable_field(self) -> &'static str {
        match self {
            Schema::Single => "text",
            Schema::ClaimEvidence => "claim",
            Schema::PremiseHypothesis => "hypothesis",
        }
    }

    fn context_field(self) -> Option<&'static str> {
        match self {
            Schema::Single => None,
            Schema::ClaimEvidence => Some("evidence"),
            Schema::PremiseHypothesis => Some("premise"),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schema {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Schema::Single),
            "claim_evidence" => Ok(Schema::ClaimEvidence),
            "premise_hypothesis" => Ok(Schema::PremiseHypothesis),
            other => Err(CorpusError::UnknownSchema(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

/// Splits `text` into normalized tokens.
///
/// Lowercases (Unicode-aware), splits on whitespace, trims non-alphanumeric
/// characters from both ends of each piece and drops pieces left empty.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let folded;
    let text = if config.lowercase {
        folded = text.to_lowercase();
        folded.as_str()
    } else {
        text
    };
    text.split_whitespace()
        .map(|piece| {
            if config.strip_punctuation {
                piece.trim_matches(|c: char| !c.is_alphanumeric())
            } else {
                piece
            }
        })
        .filter(|piece| !piece.is_empty())
        .map(str::to_string)
        .collect()
}

/// One labeled record. `tokens` is always the tokenizer output of
/// `mutable_text`; the only way to change the text is [`LabeledDocument::with_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDocument {
    id: String,
    mutable_text: String,
    context_text: Option<String>,
    label: ClassId,
    tokens: Vec<String>,
}

impl LabeledDocument {
    pub fn new(
        id: impl Into<String>,
        mutable_text: impl Into<String>,
        context_text: Option<String>,
        label: ClassId,
        tokenizer: &TokenizerConfig,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let mutable_text = mutable_text.into();
        let tokens = tokenize(&mutable_text, tokenizer);
        if tokens.is_empty() {
            return Err(CorpusError::EmptyText(id));
        }
        Ok(Self {
            id,
            mutable_text,
            context_text,
            label,
            tokens,
        })
    }

    /// Copy of this document with the rewritable text replaced. Id, label and
    /// context are kept.
    pub fn with_text(
        &self,
        mutable_text: impl Into<String>,
        tokenizer: &TokenizerConfig,
    ) -> Result<Self, CorpusError> {
        Self::new(
            self.id.clone(),
            mutable_text,
            self.context_text.clone(),
            self.label,
            tokenizer,
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mutable_text(&self) -> &str {
        &self.mutable_text
    }

    pub fn context_text(&self) -> Option<&str> {
        self.context_text.as_deref()
    }

    pub fn label(&self) -> ClassId {
        self.label
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How labels are spelled in the source file; saving reproduces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    Numeric,
    Named,
}

/// Class ids with their display names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    names: BTreeMap<ClassId, String>,
}

impl LabelSet {
    /// Builds a label set from names given in id order (`names[i]` is class `i`).
    pub fn from_names<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::default();
        for (i, name) in names.into_iter().enumerate() {
            set.insert(ClassId(i as u32), name)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, id: ClassId, name: impl Into<String>) -> Result<(), CorpusError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(CorpusError::InvalidLabelSet(format!("class {id} has an empty name")));
        }
        if self
            .names
            .iter()
            .any(|(other, n)| *other != id && n.eq_ignore_ascii_case(&name))
        {
            return Err(CorpusError::InvalidLabelSet(format!("duplicate label name `{name}`")));
        }
        self.names.insert(id, name);
        Ok(())
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    /// Case-insensitive lookup by name.
    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.names
            .iter()
            .find(|(_, n)| n.eq_ignore_ascii_case(name))
            .map(|(id, _)| *id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.names.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.names.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &str)> + '_ {
        self.names.iter().map(|(id, n)| (*id, n.as_str()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// An ordered collection of documents sharing one schema and label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    documents: Vec<LabeledDocument>,
    label_set: LabelSet,
    schema: Schema,
    label_format: LabelFormat,
    tokenizer: TokenizerConfig,
}

impl Dataset {
    pub fn new(
        documents: Vec<LabeledDocument>,
        label_set: LabelSet,
        schema: Schema,
        label_format: LabelFormat,
        tokenizer: TokenizerConfig,
    ) -> Result<Self, CorpusError> {
        let dataset = Self {
            documents,
            label_set,
            schema,
            label_format,
            tokenizer,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.documents.len());
        let mut labels = BTreeSet::new();
        for doc in &self.documents {
            if !seen.insert(doc.id()) {
                return Err(CorpusError::DuplicateDocumentId(doc.id().to_string()));
            }
            if !self.label_set.contains(doc.label()) {
                return Err(CorpusError::LabelNotDeclared(doc.label()));
            }
            labels.insert(doc.label());
        }
        if labels.len() < 2 {
            return Err(CorpusError::TooFewLabels(labels.len()));
        }
        Ok(())
    }

    pub fn documents(&self) -> &[LabeledDocument] {
        &self.documents
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn label_format(&self) -> LabelFormat {
        self.label_format
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledDocument> {
        self.documents.iter().find(|d| d.id() == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.id() == id)
    }

    /// Distinct labels that actually occur, ascending.
    pub fn present_labels(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.documents.iter().map(|d| d.label()).collect();
        set.into_iter().collect()
    }

    /// Replaces the mutable text of the documents named in `replacements`,
    /// keeping order, ids, labels and contexts.
    pub fn with_replacements(
        &self,
        replacements: &BTreeMap<String, String>,
    ) -> Result<Self, CorpusError> {
        let mut documents = Vec::with_capacity(self.documents.len());
        for doc in &self.documents {
            match replacements.get(doc.id()) {
                Some(text) => documents.push(doc.with_text(text.clone(), &self.tokenizer)?),
                None => documents.push(doc.clone()),
            }
        }
        Ok(Self {
            documents,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Self {
        Self {
            documents: Vec::new(),
            label_set: self.label_set.clone(),
            schema: self.schema,
            label_format: self.label_format,
            tokenizer: self.tokenizer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Numeric(u32),
    Named(String),
}

#[derive(Serialize)]
struct SingleRow<'a> {
    id: &'a str,
    text: &'a str,
    label: LabelValue,
}

#[derive(Serialize)]
struct ClaimEvidenceRow<'a> {
    id: &'a str,
    claim: &'a str,
    evidence: &'a str,
    label: LabelValue,
}

#[derive(Serialize)]
struct PremiseHypothesisRow<'a> {
    id: &'a str,
    premise: &'a str,
    hypothesis: &'a str,
    label: LabelValue,
}

struct RawRecord {
    line: usize,
    id: String,
    mutable_text: String,
    context_text: Option<String>,
    label: LabelValue,
}

fn required_str(
    object: &serde_json::Map<String, serde_json::Value>,
    field: &'static str,
    line: usize,
    schema: Schema,
) -> Result<String, CorpusError> {
    match object.get(field) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(serde_json::Value::Number(n)) if field == "id" => Ok(n.to_string()),
        Some(_) => Err(CorpusError::MalformedLine {
            line,
            message: format!("field `{field}` must be a string"),
        }),
        None => Err(CorpusError::MissingField { line, field, schema }),
    }
}

fn parse_line(raw: &str, line: usize, schema: Schema) -> Result<RawRecord, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| CorpusError::MalformedLine {
            line,
            message: e.to_string(),
        })?;
    let object = value.as_object().ok_or_else(|| CorpusError::MalformedLine {
        line,
        message: "expected a JSON object".into(),
    })?;
    let id = required_str(object, "id", line, schema)?;
    let mutable_text = required_str(object, schema.mutable_field(), line, schema)?;
    let context_text = match schema.context_field() {
        Some(field) => Some(required_str(object, field, line, schema)?),
        None => None,
    };
    let label = match object.get("label") {
        Some(serde_json::Value::Number(n)) => n
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .map(LabelValue::Numeric)
            .ok_or_else(|| CorpusError::UnknownLabel {
                line,
                label: n.to_string(),
            })?,
        Some(serde_json::Value::String(s)) => LabelValue::Named(s.clone()),
        Some(other) => {
            return Err(CorpusError::UnknownLabel {
                line,
                label: other.to_string(),
            })
        }
        None => {
            return Err(CorpusError::MissingField {
                line,
                field: "label",
                schema,
            })
        }
    };
    Ok(RawRecord {
        line,
        id,
        mutable_text,
        context_text,
        label,
    })
}

fn infer_label_set(records: &[RawRecord]) -> Result<LabelSet, CorpusError> {
    let mut numeric = BTreeSet::new();
    let mut named = BTreeSet::new();
    for record in records {
        match &record.label {
            LabelValue::Numeric(v) => {
                numeric.insert(*v);
            }
            LabelValue::Named(s) => {
                named.insert(s.clone());
            }
        }
    }
    if !numeric.is_empty() && !named.is_empty() {
        return Err(CorpusError::InvalidLabelSet(
            "file mixes numeric and string labels".into(),
        ));
    }
    let mut set = LabelSet::default();
    for v in numeric {
        set.insert(ClassId(v), v.to_string())?;
    }
    for (i, name) in named.into_iter().enumerate() {
        set.insert(ClassId(i as u32), name)?;
    }
    Ok(set)
}

/// Loads a JSON-Lines dataset. Blank lines are skipped; line numbers in
/// errors are 1-based file lines.
///
/// When `labels` is `None` the label set is inferred from the file: numeric
/// labels map to themselves, string labels are numbered in sorted order.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: Schema,
    labels: Option<&LabelSet>,
    tokenizer: &TokenizerConfig,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, index + 1, schema)?);
    }

    let label_set = match labels {
        Some(set) => set.clone(),
        None => {
            let set = infer_label_set(&records)?;
            log::warn!(
                "no label set declared for {}; inferred {} labels from data",
                path.display(),
                set.len()
            );
            set
        }
    };
    let label_format = match records.first().map(|r| &r.label) {
        Some(LabelValue::Named(_)) => LabelFormat::Named,
        _ => LabelFormat::Numeric,
    };

    let mut seen = HashSet::with_capacity(records.len());
    let mut documents = Vec::with_capacity(records.len());
    for record in records {
        let label = match &record.label {
            LabelValue::Numeric(v) if label_set.contains(ClassId(*v)) => ClassId(*v),
            LabelValue::Named(name) => {
                label_set
                    .id_of(name)
                    .ok_or_else(|| CorpusError::UnknownLabel {
                        line: record.line,
                        label: format!("\"{name}\""),
                    })?
            }
            LabelValue::Numeric(v) => {
                return Err(CorpusError::UnknownLabel {
                    line: record.line,
                    label: v.to_string(),
                })
            }
        };
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: record.line,
                id: record.id,
            });
        }
        let line = record.line;
        let doc = LabeledDocument::new(
            record.id,
            record.mutable_text,
            record.context_text,
            label,
            tokenizer,
        )
        .map_err(|e| match e {
            CorpusError::EmptyText(id) => CorpusError::EmptyDocument { line, id },
            other => other,
        })?;
        documents.push(doc);
    }

    Dataset::new(documents, label_set, schema, label_format, tokenizer.clone())
}

/// Writes `dataset` as JSON-Lines in its own schema and label spelling.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    dataset.validate()?;
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    write_dataset(dataset, &mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Serializes `dataset` to any writer, one JSON object per line.
pub fn write_dataset<W: Write>(dataset: &Dataset, out: &mut W) -> std::io::Result<()> {
    for doc in dataset.documents() {
        let label = match dataset.label_format() {
            LabelFormat::Numeric => LabelValue::Numeric(doc.label().0),
            LabelFormat::Named => LabelValue::Named(
                dataset
                    .label_set()
                    .name(doc.label())
                    .unwrap_or_default()
                    .to_string(),
            ),
        };
        let context = doc.context_text().unwrap_or_default();
        let line = match dataset.schema() {
            Schema::Single => serde_json::to_string(&SingleRow {
                id: doc.id(),
                text: doc.mutable_text(),
                label,
            }),
            Schema::ClaimEvidence => serde_json::to_string(&ClaimEvidenceRow {
                id: doc.id(),
                claim: doc.mutable_text(),
                evidence: context,
                label,
            }),
            Schema::PremiseHypothesis => serde_json::to_string(&PremiseHypothesisRow {
                id: doc.id(),
                premise: context,
                hypothesis: doc.mutable_text(),
                label,
            }),
        }?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
