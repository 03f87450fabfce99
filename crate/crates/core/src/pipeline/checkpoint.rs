//! On-disk run state.
//!
//! ```text
//! <dir>/iteration_0000.jsonl   input snapshot
//! <dir>/iteration_0001.jsonl   dataset after iteration 1, ...
//! <dir>/trace.json             completed IterationTrace list
//! <dir>/progress_0002.jsonl    per-document rewrite outcomes of iteration 2
//! <dir>/failure.json           trace of the last aborted iteration
//! <dir>/status.json            stop reason once the run has finished
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{IterationTrace, PipelineError, StopReason};
use crate::corpus::{load_dataset, save_dataset, Dataset};
use crate::corpus::LabelSet;
use crate::rewriter::RewriteCandidate;

/// Generation and verification results for one document, as cached for resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentOutcome {
    pub doc_id: String,
    pub original: String,
    pub candidates: Vec<RewriteCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub stop_reason: StopReason,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    dir: PathBuf,
}

fn err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Checkpoint(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| err(path, e))
}

impl Checkpoint {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| err(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot_path(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("iteration_{iteration:04}.jsonl"))
    }

    fn progress_path(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("progress_{iteration:04}.jsonl"))
    }

    fn trace_path(&self) -> PathBuf {
        self.dir.join("trace.json")
    }

    fn status_path(&self) -> PathBuf {
        self.dir.join("status.json")
    }

    pub fn save_snapshot(&self, iteration: usize, dataset: &Dataset) -> Result<(), PipelineError> {
        let path = self.snapshot_path(iteration);
        let tmp = path.with_extension("tmp");
        save_dataset(dataset, &tmp)?;
        fs::rename(&tmp, &path).map_err(|e| err(&path, e))
    }

    /// Loads a snapshot using the schema, labels and tokenizer of `like`.
    pub fn load_snapshot(&self, iteration: usize, like: &Dataset) -> Result<Dataset, PipelineError> {
        let labels: &LabelSet = like.label_set();
        Ok(load_dataset(
            self.snapshot_path(iteration),
            like.schema(),
            Some(labels),
            like.tokenizer(),
        )?)
    }

    pub fn load_traces(&self) -> Result<Vec<IterationTrace>, PipelineError> {
        let path = self.trace_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| err(&path, e))
    }

    pub fn save_traces(&self, traces: &[IterationTrace]) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(traces).map_err(|e| err(&self.trace_path(), e))?;
        write_atomic(&self.trace_path(), &(json + "\n"))
    }

    pub fn save_failure(&self, trace: &IterationTrace) -> Result<(), PipelineError> {
        let path = self.dir.join("failure.json");
        let json = serde_json::to_string_pretty(trace).map_err(|e| err(&path, e))?;
        write_atomic(&path, &(json + "\n"))
    }

    pub fn load_status(&self) -> Result<Option<RunStatus>, PipelineError> {
        let path = self.status_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| err(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| err(&path, e))
    }

    pub fn save_status(&self, status: &RunStatus) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(status).map_err(|e| err(&self.status_path(), e))?;
        write_atomic(&self.status_path(), &(json + "\n"))
    }

    /// Cached outcomes of `iteration`. A truncated trailing line (from a
    /// crash mid-write) is ignored.
    pub fn load_progress(&self, iteration: usize) -> Result<HashMap<String, DocumentOutcome>, PipelineError> {
        let path = self.progress_path(iteration);
        let mut out = HashMap::new();
        if !path.exists() {
            return Ok(out);
        }
        let file = File::open(&path).map_err(|e| err(&path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| err(&path, e))?;
            match serde_json::from_str::<DocumentOutcome>(&line) {
                Ok(outcome) => {
                    out.insert(outcome.doc_id.clone(), outcome);
                }
                Err(e) => log::warn!("{}: skipping unreadable progress line: {e}", path.display()),
            }
        }
        Ok(out)
    }

    pub fn progress_writer(&self, iteration: usize) -> Result<ProgressWriter, PipelineError> {
        let path = self.progress_path(iteration);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| err(&path, e))?;
        Ok(ProgressWriter {
            path,
            out: Mutex::new(BufWriter::new(file)),
        })
    }
}

/// Append-only log of finished documents, flushed after every record.
#[derive(Debug)]
pub struct ProgressWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl ProgressWriter {
    pub fn record(&self, outcome: &DocumentOutcome) -> Result<(), PipelineError> {
        let line = serde_json::to_string(outcome).map_err(|e| err(&self.path, e))?;
        let mut out = self.out.lock().unwrap();
        writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| err(&self.path, e))
    }
}
