//! Measurement and synthetic-experiment helpers: term counts, corpus BLEU,
//! class-conditional frequency gap, a planted-bias corpus generator and
//! before/after reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    tokenize, ClassId, CorpusError, Dataset, LabelFormat, LabelSet, LabeledDocument, Schema, TokenizerConfig,
};
use crate::pipeline::IterationTrace;
use crate::rewriter::mock::{MockRule, MockRules};
use crate::surface::{embed_dataset, shortcut_scores, CorpusStats, EmbeddingMap, SurfaceError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no terms given")]
    NoTerms,
    #[error("corpora are empty")]
    EmptyCorpus,
    #[error("corpus length mismatch: {candidates} candidates vs {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("max_n must be at least 1")]
    InvalidOrder,
    #[error("invalid bias spec: {0}")]
    InvalidSpec(String),
    #[error("datasets are not comparable: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Occurrences of one term, per class and overall.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub per_class: BTreeMap<ClassId, u64>,
    pub total: u64,
}

/// Whole-token, case-insensitive occurrence counts of `terms` in the
/// rewritable text of every document. Every present class gets an entry.
pub fn count_terms(dataset: &Dataset, terms: &[&str]) -> Result<BTreeMap<String, TermCounts>, EvalError> {
    if terms.is_empty() {
        return Err(EvalError::NoTerms);
    }
    let mut out: BTreeMap<String, TermCounts> = BTreeMap::new();
    let wanted: BTreeSet<String> = terms.iter().map(|t| t.to_lowercase()).collect();
    for term in &wanted {
        let counts = out.entry(term.clone()).or_default();
        for class in dataset.present_labels() {
            counts.per_class.insert(class, 0);
        }
    }
    for doc in dataset.documents() {
        for token in doc.tokens() {
            let token = token.to_lowercase();
            if let Some(counts) = out.get_mut(&token) {
                *counts.per_class.entry(doc.label()).or_default() += 1;
                counts.total += 1;
            }
        }
    }
    Ok(out)
}

/// Largest pairwise difference between per-class document-presence rates
/// of `token` (whole-token, case-insensitive).
pub fn frequency_gap(dataset: &Dataset, token: &str) -> f64 {
    let token = token.to_lowercase();
    let mut per_class: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for doc in dataset.documents() {
        let entry = per_class.entry(doc.label()).or_default();
        entry.1 += 1;
        if doc.tokens().iter().any(|t| t.to_lowercase() == token) {
            entry.0 += 1;
        }
    }
    let rates = per_class.values().map(|&(hit, n)| hit as f64 / n as f64);
    let (lo, hi) = rates.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    if hi.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU on whitespace tokens, scaled to 0-100.
///
/// Clipped matches and totals are summed over the corpus per order before
/// the geometric mean. Orders for which the candidate corpus has no n-grams
/// at all are left out of the mean. With `smoothing`, orders above 1 use
/// add-one counts.
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[R], max_n: usize, smoothing: bool) -> Result<f64, EvalError>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if max_n == 0 {
        return Err(EvalError::InvalidOrder);
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        let cand: Vec<&str> = cand.as_ref().split_whitespace().collect();
        let reference: Vec<&str> = reference.as_ref().split_whitespace().collect();
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(&reference, n);
            for (gram, count) in ngram_counts(&cand, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    if cand_len == 0 {
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        let (m, t) = if smoothing && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if t == 0 {
            continue;
        }
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
        orders += 1;
    }
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_sum / orders as f64).exp())
}

/// Parameters of a synthetic corpus with one planted spurious token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub planted_token: String,
    pub biased_class: ClassId,
    /// Fraction of biased-class documents carrying the token.
    pub bias_rate: f64,
    /// Fraction of documents in every other class carrying the token.
    pub background_rate: f64,
    pub corpus_size: usize,
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: u32,
}

fn default_classes() -> u32 {
    2
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            planted_token: "not".into(),
            biased_class: ClassId(0),
            bias_rate: 0.9,
            background_rate: 0.1,
            corpus_size: 1000,
            seed: 0,
            num_classes: 2,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidSpec(m));
        let token = tokenize(&self.planted_token, &TokenizerConfig::default());
        if token.len() != 1 || token[0] != self.planted_token {
            return bad(format!(
                "planted token must be a single lowercase word, got `{}`",
                self.planted_token
            ));
        }
        if ["the", "in"].iter().chain(SUBJECTS).chain(VERBS).chain(OBJECTS).chain(PLACES).any(|w| *w == token[0]) {
            return bad(format!("planted token `{}` collides with the template vocabulary", self.planted_token));
        }
        for (name, rate) in [("bias_rate", self.bias_rate), ("background_rate", self.background_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} must be in [0, 1], got {rate}"));
            }
        }
        if self.bias_rate <= self.background_rate {
            return bad(format!(
                "bias_rate ({}) must exceed background_rate ({})",
                self.bias_rate, self.background_rate
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.biased_class.0 >= self.num_classes {
            return bad(format!("biased_class {} out of range", self.biased_class));
        }
        if self.corpus_size < self.num_classes as usize {
            return bad(format!("corpus_size must be at least {}", self.num_classes));
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        const NAMES: [&str; 3] = ["refutes", "supports", "neutral"];
        (0..self.num_classes as usize)
            .map(|i| NAMES.get(i).map_or_else(|| format!("class_{i}"), |n| n.to_string()))
            .collect()
    }
}

// Fixed frame "the <subject> <verb> <object> in <place>": every document
// has the same length apart from the planted token.
const SUBJECTS: &[&str] = &["river", "bridge", "library", "mayor", "museum", "team", "village", "company"];
const VERBS: &[&str] = &["was", "is", "became", "remained"];
const OBJECTS: &[&str] = &["famous", "closed", "rebuilt", "popular", "small", "expensive", "busy", "quiet"];
const PLACES: &[&str] = &["spring", "winter", "town", "europe", "practice", "public"];

/// Generates the planted-bias corpus and mock rules that delete the planted
/// token. Labels are assigned round-robin; exactly `round(rate * n_class)`
/// documents of each class carry the token.
pub fn generate_biased_corpus(spec: &BiasSpec) -> Result<(Dataset, MockRules), EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.num_classes as usize;
    let mut planted = vec![false; spec.corpus_size];
    for class in 0..classes {
        let mut members: Vec<usize> = (class..spec.corpus_size).step_by(classes).collect();
        let rate = if class as u32 == spec.biased_class.0 {
            spec.bias_rate
        } else {
            spec.background_rate
        };
        let hits = (rate * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &i in &members[..hits] {
            planted[i] = true;
        }
    }
    let tokenizer = TokenizerConfig::default();
    let width = spec.corpus_size.to_string().len();
    let pick = |rng: &mut ChaCha8Rng, words: &[&'static str]| *words.choose(rng).expect("non-empty word list");
    let mut documents = Vec::with_capacity(spec.corpus_size);
    for (i, &with_token) in planted.iter().enumerate() {
        let mut parts = vec!["the", pick(&mut rng, SUBJECTS), pick(&mut rng, VERBS)];
        if with_token {
            parts.push(&spec.planted_token);
        }
        parts.extend([pick(&mut rng, OBJECTS), "in", pick(&mut rng, PLACES)]);
        let text = parts.join(" ") + ".";
        let label = ClassId((i % classes) as u32);
        documents.push(LabeledDocument::new(format!("syn-{i:0width$}"), text, None, label, &tokenizer)?);
    }
    let labels = LabelSet::from_names(spec.label_names())?;
    let dataset = Dataset::new(documents, labels, Schema::Single, LabelFormat::Named, tokenizer)?;
    let rules = MockRules {
        seed: spec.seed,
        rules: vec![MockRule {
            pattern: format!(r"(?i)\b{}\b", regex::escape(&spec.planted_token)),
            replacement: String::new(),
        }],
        ..Default::default()
    };
    Ok((dataset, rules))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDelta {
    pub term: String,
    pub before: TermCounts,
    pub after: TermCounts,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDelta {
    pub token: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub term_counts: Vec<TermDelta>,
    pub frequency_gap: Vec<GapDelta>,
    /// BLEU of the rewritten texts against their originals; over all pairs
    /// when nothing changed.
    pub corpus_bleu: Option<f64>,
    pub rewritten_documents: usize,
    pub bleu_pairs: usize,
    /// Objective at the start of each iteration, then after the last one.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOptions {
    pub max_n: usize,
    pub smoothing: bool,
    /// Score BLEU on at most this many randomly drawn rewritten pairs.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl ReportOptions {
    pub fn new() -> Self {
        Self {
            max_n: 4,
            ..Default::default()
        }
    }
}

/// Objective at the start of every iteration followed by the value after
/// the last iteration.
pub fn objective_trace(traces: &[IterationTrace]) -> Vec<f64> {
    let mut out: Vec<f64> = traces.iter().map(|t| t.objective_before).collect();
    if let Some(last) = traces.last() {
        out.push(last.objective_refreshed.unwrap_or(last.objective_after));
    }
    out
}

/// Compares two versions of the same dataset.
pub fn emit_report(
    before: &Dataset,
    after: &Dataset,
    traces: &[IterationTrace],
    terms: &[&str],
    options: &ReportOptions,
) -> Result<BiasReport, EvalError> {
    if before.schema() != after.schema() {
        return Err(EvalError::SchemaMismatch(format!("{} vs {}", before.schema(), after.schema())));
    }
    if before.label_set() != after.label_set() {
        return Err(EvalError::SchemaMismatch("label sets differ".into()));
    }
    if before.len() != after.len() {
        return Err(EvalError::SchemaMismatch(format!("{} vs {} documents", before.len(), after.len())));
    }
    let mut pairs = Vec::new();
    let mut all_pairs = Vec::with_capacity(before.len());
    for (b, a) in before.documents().iter().zip(after.documents()) {
        if b.id() != a.id() {
            return Err(EvalError::SchemaMismatch(format!("document order differs at `{}` / `{}`", b.id(), a.id())));
        }
        if b.label() != a.label() {
            return Err(EvalError::SchemaMismatch(format!("document `{}` changed label", b.id())));
        }
        all_pairs.push((a.mutable_text(), b.mutable_text()));
        if a.mutable_text() != b.mutable_text() {
            pairs.push((a.mutable_text(), b.mutable_text()));
        }
    }
    let rewritten_documents = pairs.len();
    if pairs.is_empty() {
        pairs = all_pairs;
    }
    if let Some(n) = options.sample {
        if n < pairs.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            pairs.shuffle(&mut rng);
            pairs.truncate(n);
        }
    }
    let corpus_bleu = if pairs.is_empty() {
        None
    } else {
        let (cand, refs): (Vec<&str>, Vec<&str>) = pairs.iter().copied().unzip();
        Some(corpus_bleu(&cand, &refs, options.max_n.max(1), options.smoothing)?)
    };

    let (term_counts, frequency_gap) = if terms.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let counts_before = count_terms(before, terms)?;
        let counts_after = count_terms(after, terms)?;
        let term_counts = counts_before
            .into_iter()
            .map(|(term, b)| {
                let a = counts_after[&term].clone();
                TermDelta {
                    delta: a.total as i64 - b.total as i64,
                    term,
                    before: b,
                    after: a,
                }
            })
            .collect();
        let gaps = counts_after
            .keys()
            .map(|token| {
                let b = frequency_gap(before, token);
                let a = frequency_gap(after, token);
                GapDelta {
                    token: token.clone(),
                    before: b,
                    after: a,
                    delta: a - b,
                }
            })
            .collect();
        (term_counts, gaps)
    };

    Ok(BiasReport {
        term_counts,
        frequency_gap,
        corpus_bleu,
        rewritten_documents,
        bleu_pairs: pairs.len(),
        objective_trace: objective_trace(traces),
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_report_json(report: &BiasReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report).map_err(|e| io_err(path, e))?;
    std::fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

/// Flat CSV view of a report: `metric,key,class,before,after,delta`.
pub fn write_report_csv<W: Write>(report: &BiasReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "key", "class", "before", "after", "delta"])?;
    for t in &report.term_counts {
        w.write_record(["term_count", &t.term, "all", &t.before.total.to_string(), &t.after.total.to_string(), &t.delta.to_string()])?;
        for (class, b) in &t.before.per_class {
            let a = t.after.per_class.get(class).copied().unwrap_or(0);
            let delta = a as i64 - *b as i64;
            w.write_record(["term_count", &t.term, &class.to_string(), &b.to_string(), &a.to_string(), &delta.to_string()])?;
        }
    }
    for g in &report.frequency_gap {
        w.write_record(["frequency_gap", &g.token, "all", &g.before.to_string(), &g.after.to_string(), &g.delta.to_string()])?;
    }
    if let Some(bleu) = report.corpus_bleu {
        w.write_record(["corpus_bleu", "", "all", "", &bleu.to_string(), ""])?;
    }
    for (i, value) in report.objective_trace.iter().enumerate() {
        w.write_record(["objective", &i.to_string(), "all", "", &value.to_string(), ""])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a shortcut-score ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub rank: Option<usize>,
    pub id: String,
    pub label: ClassId,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub documents: usize,
    pub scored: usize,
    pub unscored: usize,
    pub mean_gamma: Option<f64>,
    pub max_gamma: Option<f64>,
    pub min_gamma: Option<f64>,
    pub objective: f64,
}

/// Shortcut scores for all documents, highest first (ties by id); unscored
/// documents last in dataset order.
pub fn analyze(dataset: &Dataset, lambda: usize) -> Result<(Vec<ScoreRow>, ScoreSummary, EmbeddingMap), EvalError> {
    let stats = CorpusStats::build(dataset, 0);
    let embeddings = embed_dataset(dataset, &stats, lambda)?;
    let sums = crate::surface::ClassSums::build(dataset, &embeddings, lambda)?;
    let objective = sums.objective()?;
    let labels: HashMap<&str, ClassId> = dataset.documents().iter().map(|d| (d.id(), d.label())).collect();
    let (mut scored, unscored): (Vec<_>, Vec<_>) = shortcut_scores(dataset, &embeddings, lambda)?
        .into_iter()
        .partition(|(_, g)| g.is_some());
    scored.sort_by(|a, b| b.1.unwrap().total_cmp(&a.1.unwrap()).then_with(|| a.0.cmp(&b.0)));
    let gammas: Vec<f64> = scored.iter().map(|(_, g)| g.unwrap()).collect();
    let summary = ScoreSummary {
        documents: dataset.len(),
        scored: scored.len(),
        unscored: unscored.len(),
        mean_gamma: (!gammas.is_empty()).then(|| gammas.iter().sum::<f64>() / gammas.len() as f64),
        max_gamma: gammas.first().copied(),
        min_gamma: gammas.last().copied(),
        objective,
    };
    let rows = scored
        .into_iter()
        .enumerate()
        .map(|(i, (id, gamma))| (Some(i + 1), id, gamma))
        .chain(unscored.into_iter().map(|(id, gamma)| (None, id, gamma)))
        .map(|(rank, id, gamma)| ScoreRow {
            rank,
            label: labels[id.as_str()],
            id,
            gamma,
        })
        .collect();
    Ok((rows, summary, embeddings))
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    id: &'a str,
    vector: &'a [f64],
}

/// Writes `{"id", "vector"}` lines in dataset order; documents without an
/// embedding are skipped.
pub fn write_embeddings<W: Write>(dataset: &Dataset, embeddings: &EmbeddingMap, mut out: W) -> std::io::Result<()> {
    for doc in dataset.documents() {
        if let Some(e) = embeddings.get(doc.id()) {
            let row = EmbeddingRow {
                id: doc.id(),
                vector: e.vector(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}
