//! Iterative score → select → rewrite → replace loop.
//!
//! Each iteration recomputes corpus statistics and surface embeddings,
//! selects the `k` documents with the highest shortcut score, rewrites them
//! through the backend and commits the accepted replacements at the end of
//! the iteration. The run stops once the cross-class alignment objective
//! stops improving.
//!
//! Replacements are committed one document at a time in rank order, each
//! scored against the running per-class unit-vector sums. The objective is
//! bilinear in those sums, so a replacement that lowers its document's
//! shortcut score raises the objective by exactly the same amount times the
//! opposite-class count, and the iteration can never lose ground.
//!
//! Convergence is judged against the headroom left below the objective's
//! ceiling (the number of cross-class pairs): surface embeddings share a
//! large common component, so the raw objective sits close to the ceiling
//! and its relative change says little.

mod checkpoint;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, DocumentOutcome, ProgressWriter, RunStatus};

use crate::corpus::{tokenize, CorpusError, Dataset, TokenizerConfig};
use crate::rewriter::{
    rewrite_document, select_replacement, CallCounter, GeneratorConfig, LlmCalls, PromptTemplate,
    ReplacementDecision, RewriteBackend, RewriteCandidate, RewriteError,
};
use crate::surface::{
    embed_dataset, embed_tokens, shortcut_scores, ClassSums, CorpusStats, EmbeddingMap, SurfaceError,
    DEFAULT_LAMBDA,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Rewrite(RewriteError),
    #[error("iteration {iteration} aborted: {source}")]
    Backend {
        iteration: usize,
        #[source]
        source: RewriteError,
        trace: Box<IterationTrace>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Documents rewritten per iteration: an absolute count or a fraction of |D|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopK {
    Count(usize),
    Fraction(f64),
}

impl TopK {
    pub fn resolve(self, dataset_len: usize) -> usize {
        match self {
            TopK::Count(k) => k,
            TopK::Fraction(f) => ((f * dataset_len as f64).ceil() as usize).max(1),
        }
    }
}

impl Default for TopK {
    fn default() -> Self {
        TopK::Fraction(0.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub k: TopK,
    pub lambda: usize,
    /// Minimum improvement, as a fraction of the remaining headroom below
    /// the objective ceiling, needed to keep iterating.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub generator: GeneratorConfig,
    pub tokenizer: TokenizerConfig,
    pub seed: u64,
    /// Worker threads for scoring and concurrent backend calls; 0 = all cores.
    pub jobs: usize,
    /// Label names in class-id order; inferred from the data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PromptTemplate>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: TopK::default(),
            lambda: DEFAULT_LAMBDA,
            epsilon: 1e-4,
            max_iterations: 10,
            generator: GeneratorConfig::default(),
            tokenizer: TokenizerConfig::default(),
            seed: 0,
            jobs: 0,
            labels: None,
            template: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.k {
            TopK::Count(0) => return Err(PipelineError::Config("k must be positive".into())),
            TopK::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(PipelineError::Config(format!("fractional k must be in (0, 1], got {f}")))
            }
            _ => {}
        }
        if self.lambda == 0 || self.lambda % 2 != 0 {
            return Err(PipelineError::Config(format!("lambda must be even and positive, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(PipelineError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iterations == 0 {
            return Err(PipelineError::Config("max_iterations must be at least 1".into()));
        }
        self.generator.validate().map_err(PipelineError::Config)
    }

    fn template_for(&self, dataset: &Dataset) -> PromptTemplate {
        self.template
            .clone()
            .unwrap_or_else(|| PromptTemplate::for_schema(dataset.schema()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    NoReplacements,
    MaxIterations,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::NoReplacements => "no_replacements",
            StopReason::MaxIterations => "max_iterations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Objective on the selection-time embeddings.
    pub objective_before: f64,
    /// Objective on the selection-time embeddings with accepted
    /// replacements swapped in.
    pub objective_after: f64,
    /// Objective after recomputing statistics on the new dataset.
    pub objective_refreshed: Option<f64>,
    /// Number of cross-class document pairs; the objective cannot exceed it.
    #[serde(default)]
    pub objective_ceiling: f64,
    pub selected_ids: Vec<String>,
    pub replaced_ids: Vec<String>,
    pub kept_ids: Vec<String>,
    pub llm_calls: LlmCalls,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Ids of the `k` highest-scoring documents, best first; ties go to the
/// smaller id. Unscoreable documents are never selected.
pub fn rank_and_select(
    dataset: &Dataset,
    embeddings: &EmbeddingMap,
    lambda: usize,
    k: usize,
) -> Result<Vec<(String, f64)>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Config("k must be positive".into()));
    }
    let mut scored: Vec<(String, f64)> = shortcut_scores(dataset, embeddings, lambda)?
        .into_iter()
        .filter_map(|(id, s)| s.map(|s| (id, s)))
        .collect();
    if scored.len() < k {
        log::warn!("only {} scoreable documents for k = {k}; selecting all of them", scored.len());
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Per-run context shared by all iterations.
pub struct Razor<'a> {
    config: RunConfig,
    backend: &'a dyn RewriteBackend,
    checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dataset: Dataset,
    pub traces: Vec<IterationTrace>,
    pub stop_reason: StopReason,
}

/// Objective gain as a fraction of the headroom `ceiling - before`.
pub fn relative_improvement(before: f64, after: f64, ceiling: f64) -> f64 {
    let headroom = ceiling - before;
    if headroom > 1e-9 * ceiling.max(1.0) {
        (after - before) / headroom
    } else {
        0.0
    }
}

impl<'a> Razor<'a> {
    pub fn new(config: RunConfig, backend: &'a dyn RewriteBackend) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            config,
            backend,
            checkpoint: None,
        })
    }

    pub fn with_checkpoint(mut self, checkpoint: Checkpoint) -> Self {
        self.checkpoint = Some(checkpoint);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        if self.config.jobs == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(self.config.jobs).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {}-thread pool ({e}); using the global pool", self.config.jobs);
                f()
            }
        }
    }

    /// One score → select → rewrite → commit pass. On backend failure the
    /// input dataset is left as is and the error carries the partial trace.
    pub fn run_iteration(&self, dataset: &Dataset, iteration: usize) -> Result<(Dataset, IterationTrace), PipelineError> {
        let started = Instant::now();
        let lambda = self.config.lambda;
        let k = self.config.k.resolve(dataset.len());
        let template = self.config.template_for(dataset);

        let stats = CorpusStats::build(dataset, iteration as u64);
        let embeddings = self.in_pool(|| embed_dataset(dataset, &stats, lambda))?;
        let mut sums = ClassSums::build(dataset, &embeddings, lambda)?;
        let objective_before = sums.objective()?;
        let objective_ceiling = sums.ceiling();
        let selected = rank_and_select(dataset, &embeddings, lambda, k)?;
        let selected_ids: Vec<String> = selected.iter().map(|(id, _)| id.clone()).collect();

        let cached = match &self.checkpoint {
            Some(cp) => cp.load_progress(iteration)?,
            None => HashMap::new(),
        };
        let progress = match &self.checkpoint {
            Some(cp) => Some(cp.progress_writer(iteration)?),
            None => None,
        };
        let counter = CallCounter::default();

        let outcomes: Vec<Result<(Vec<RewriteCandidate>, bool), PipelineError>> = self.in_pool(|| {
            selected_ids
                .par_iter()
                .map(|id| {
                    let doc = dataset.get(id).expect("selected id exists");
                    if let Some(hit) = cached.get(id).filter(|o| o.original == doc.mutable_text()) {
                        return Ok((hit.candidates.clone(), true));
                    }
                    let candidates = rewrite_document(
                        doc,
                        dataset.label_set(),
                        &template,
                        &self.config.generator,
                        self.backend,
                        &counter,
                    )
                    .map_err(PipelineError::Rewrite)?;
                    if let Some(writer) = &progress {
                        writer.record(&DocumentOutcome {
                            doc_id: id.clone(),
                            original: doc.mutable_text().to_string(),
                            candidates: candidates.clone(),
                        })?;
                    }
                    Ok((candidates, false))
                })
                .collect()
        });

        let mut llm_calls = counter.snapshot();
        let mut per_doc = Vec::with_capacity(outcomes.len());
        let mut first_error = None;
        for outcome in outcomes {
            match outcome {
                Ok((candidates, from_cache)) => {
                    llm_calls.cached_documents += u64::from(from_cache);
                    per_doc.push(candidates);
                }
                Err(e) if first_error.is_none() => first_error = Some(e),
                Err(_) => {}
            }
        }
        if let Some(error) = first_error {
            let trace = IterationTrace {
                iteration,
                objective_before,
                objective_after: objective_before,
                objective_refreshed: None,
                objective_ceiling,
                selected_ids,
                replaced_ids: Vec::new(),
                kept_ids: Vec::new(),
                llm_calls,
                wall_time_secs: started.elapsed().as_secs_f64(),
                failure: Some(error.to_string()),
            };
            if let Some(cp) = &self.checkpoint {
                cp.save_failure(&trace)?;
            }
            return Err(match error {
                PipelineError::Rewrite(source @ RewriteError::Backend { .. }) => PipelineError::Backend {
                    iteration,
                    source,
                    trace: Box::new(trace),
                },
                other => other,
            });
        }

        // Sequential commit against running class sums.
        let tokenizer = dataset.tokenizer();
        let mut replacements = BTreeMap::new();
        let mut replaced_ids = Vec::new();
        let mut kept_ids = Vec::new();
        for (id, mut candidates) in selected_ids.iter().zip(per_doc) {
            let doc = dataset.get(id).expect("selected id exists");
            let original_unit = embeddings[id].unit().expect("selected documents are scoreable").to_vec();
            let mut units: Vec<Option<Vec<f64>>> = Vec::with_capacity(candidates.len());
            for candidate in candidates.iter_mut() {
                candidate.score = None;
                let mut unit = None;
                if candidate.verified {
                    let tokens = tokenize(&candidate.text, tokenizer);
                    if tokens.len() >= 2 {
                        let view = stats.with_replacement(doc.tokens(), &tokens);
                        let embedding = embed_tokens(id, &tokens, &view, lambda)?;
                        if let Some(u) = embedding.unit() {
                            candidate.score = Some(sums.score_unit(id, doc.label(), u)?);
                            unit = Some(u.to_vec());
                        }
                    }
                }
                units.push(unit);
            }
            let original_score = sums.score_unit(id, doc.label(), &original_unit)?;
            match select_replacement(original_score, &candidates) {
                ReplacementDecision::Replace { text, .. } => {
                    let index = candidates.iter().position(|c| c.text == text).expect("chosen candidate");
                    let unit = units[index].as_ref().expect("scored candidate has a unit vector");
                    sums.replace(doc.label(), &original_unit, unit);
                    replacements.insert(id.clone(), text);
                    replaced_ids.push(id.clone());
                }
                ReplacementDecision::KeepOriginal => kept_ids.push(id.clone()),
            }
        }
        let objective_after = sums.objective()?;
        let next = dataset.with_replacements(&replacements)?;

        let refreshed_stats = CorpusStats::build(&next, iteration as u64 + 1);
        let objective_refreshed = self
            .in_pool(|| embed_dataset(&next, &refreshed_stats, lambda))
            .ok()
            .and_then(|e| ClassSums::build(&next, &e, lambda).ok())
            .and_then(|s| s.objective().ok());

        let trace = IterationTrace {
            iteration,
            objective_before,
            objective_after,
            objective_refreshed,
            objective_ceiling,
            selected_ids,
            replaced_ids,
            kept_ids,
            llm_calls,
            wall_time_secs: started.elapsed().as_secs_f64(),
            failure: None,
        };
        Ok((next, trace))
    }

    fn stop_reason(&self, traces: &[IterationTrace]) -> Option<StopReason> {
        let trace = traces.last()?;
        let gain = relative_improvement(trace.objective_before, trace.objective_after, trace.objective_ceiling);
        if trace.replaced_ids.is_empty() && traces.iter().all(|t| t.replaced_ids.is_empty()) {
            Some(StopReason::NoReplacements)
        } else if trace.replaced_ids.is_empty() || gain < self.config.epsilon {
            Some(StopReason::Converged)
        } else if trace.iteration >= self.config.max_iterations {
            Some(StopReason::MaxIterations)
        } else {
            None
        }
    }

    /// Iterates until an iteration gains less than `epsilon` of the remaining
    /// headroom (including gaining nothing), or `max_iterations` is hit. A run
    /// whose iterations never replaced anything stops with `NoReplacements`.
    /// With a checkpoint, a previous partial run in the same directory is resumed.
    pub fn run(&self, dataset: &Dataset) -> Result<RunOutcome, PipelineError> {
        let mut traces = Vec::new();
        let mut current = dataset.clone();
        if let Some(cp) = &self.checkpoint {
            traces = cp.load_traces()?;
            if traces.is_empty() {
                cp.save_snapshot(0, dataset)?;
            } else {
                current = cp.load_snapshot(traces.len(), dataset)?;
                log::info!("resuming after {} completed iteration(s)", traces.len());
            }
            if let Some(status) = cp.load_status()? {
                if status.iterations == traces.len() {
                    return Ok(RunOutcome {
                        dataset: current,
                        traces,
                        stop_reason: status.stop_reason,
                    });
                }
            }
        }

        let stop_reason = loop {
            if let Some(reason) = self.stop_reason(&traces) {
                break reason;
            }
            let iteration = traces.len() + 1;
            let (next, trace) = self.run_iteration(&current, iteration)?;
            log::info!(
                "iteration {iteration}: objective {:.6} -> {:.6}, replaced {}/{}",
                trace.objective_before,
                trace.objective_after,
                trace.replaced_ids.len(),
                trace.selected_ids.len()
            );
            current = next;
            traces.push(trace);
            if let Some(cp) = &self.checkpoint {
                cp.save_snapshot(iteration, &current)?;
                cp.save_traces(&traces)?;
            }
        };

        if let Some(cp) = &self.checkpoint {
            cp.save_status(&RunStatus {
                stop_reason,
                iterations: traces.len(),
            })?;
        }
        Ok(RunOutcome {
            dataset: current,
            traces,
            stop_reason,
        })
    }
}

/// Runs the full loop without a checkpoint directory.
pub fn run_razor(
    dataset: &Dataset,
    config: &RunConfig,
    backend: &dyn RewriteBackend,
) -> Result<RunOutcome, PipelineError> {
    Razor::new(config.clone(), backend)?.run(dataset)
}

/// Single iteration without a checkpoint directory.
pub fn run_iteration(
    dataset: &Dataset,
    config: &RunConfig,
    backend: &dyn RewriteBackend,
    iteration: usize,
) -> Result<(Dataset, IterationTrace), PipelineError> {
    Razor::new(config.clone(), backend)?.run_iteration(dataset, iteration)
}
