//! Surface-feature space: TF-IDF token significance weighted onto sinusoidal
//! position codes, and the cosine-based scores built on top of it.
//!
//! Every cosine in this module is computed from unit vectors, so per-class
//! sums of unit vectors turn the pairwise means and double sums into single
//! dot products.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassId, Dataset, LabeledDocument};

pub const DEFAULT_LAMBDA: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("token `{0}` occurs in the document but not in the corpus statistics (stale stats)")]
    StaleStats(String),
    #[error("positional-encoding dimension must be even and positive, got {0}")]
    InvalidDimension(usize),
    #[error("document `{id}` has {tokens} token(s); at least 2 are needed")]
    DegenerateDocument { id: String, tokens: usize },
    #[error("document `{0}` has no scoreable documents with a different label")]
    NoContrast(String),
    #[error("document `{0}` has a zero surface embedding; its score is undefined")]
    ZeroEmbedding(String),
    #[error("no surface embedding for document `{0}`")]
    MissingEmbedding(String),
    #[error("class {0} has no non-zero surface embedding; objective undefined")]
    ObjectiveUndefined(ClassId),
    #[error("embedding dimension {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Document-frequency source for TF-IDF.
pub trait DocumentFrequency {
    fn doc_count(&self) -> usize;
    /// Number of documents containing `token`, or `None` if it is unseen.
    fn doc_frequency(&self, token: &str) -> Option<usize>;
}

/// Document frequencies over the mutable text of one dataset snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    doc_count: usize,
    doc_frequency: HashMap<String, usize>,
    generation: u64,
}

impl CorpusStats {
    pub fn build(dataset: &Dataset, generation: u64) -> Self {
        let mut doc_frequency: HashMap<String, usize> = HashMap::new();
        for doc in dataset.documents() {
            let distinct: HashSet<&str> = doc.tokens().iter().map(String::as_str).collect();
            for token in distinct {
                *doc_frequency.entry(token.to_string()).or_default() += 1;
            }
        }
        Self {
            doc_count: dataset.len(),
            doc_frequency,
            generation,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn vocabulary_size(&self) -> usize {
        self.doc_frequency.len()
    }

    /// Statistics of the corpus obtained by swapping one document's tokens
    /// for `replacement`, without copying the frequency table.
    pub fn with_replacement<'a>(
        &'a self,
        original: &'a [String],
        replacement: &'a [String],
    ) -> ReplacementStats<'a> {
        ReplacementStats {
            base: self,
            removed: original.iter().map(String::as_str).collect(),
            added: replacement.iter().map(String::as_str).collect(),
        }
    }
}

impl DocumentFrequency for CorpusStats {
    fn doc_count(&self) -> usize {
        self.doc_count
    }

    fn doc_frequency(&self, token: &str) -> Option<usize> {
        self.doc_frequency.get(token).copied()
    }
}

/// View of [`CorpusStats`] with one document replaced.
#[derive(Debug)]
pub struct ReplacementStats<'a> {
    base: &'a CorpusStats,
    removed: HashSet<&'a str>,
    added: HashSet<&'a str>,
}

impl DocumentFrequency for ReplacementStats<'_> {
    fn doc_count(&self) -> usize {
        self.base.doc_count
    }

    fn doc_frequency(&self, token: &str) -> Option<usize> {
        let base = self.base.doc_frequency(token).unwrap_or(0);
        let df = (base + usize::from(self.added.contains(token)))
            .saturating_sub(usize::from(self.removed.contains(token)));
        (df > 0).then_some(df)
    }
}

/// TF-IDF weight of `token` within `tokens`: `(n / |d|) * ln(|D| / df)`.
pub fn token_significance<F: DocumentFrequency + ?Sized>(
    token: &str,
    tokens: &[String],
    stats: &F,
) -> Result<f64, SurfaceError> {
    let occurrences = tokens.iter().filter(|t| t.as_str() == token).count();
    if occurrences == 0 {
        return Ok(0.0);
    }
    let df = stats
        .doc_frequency(token)
        .ok_or_else(|| SurfaceError::StaleStats(token.to_string()))?;
    let tf = occurrences as f64 / tokens.len() as f64;
    Ok(tf * (stats.doc_count() as f64 / df as f64).ln())
}

pub fn tfidf_score<F: DocumentFrequency + ?Sized>(
    token: &str,
    doc: &LabeledDocument,
    stats: &F,
) -> Result<f64, SurfaceError> {
    token_significance(token, doc.tokens(), stats)
}

fn check_lambda(lambda: usize) -> Result<(), SurfaceError> {
    if lambda == 0 || lambda % 2 != 0 {
        return Err(SurfaceError::InvalidDimension(lambda));
    }
    Ok(())
}

/// Fixed sinusoidal position code. Even components are `sin`, odd ones
/// `cos`, both of `pos / 10000^(2k/lambda)` where `k` is the component index.
pub fn positional_encoding(pos: usize, lambda: usize) -> Result<Vec<f64>, SurfaceError> {
    check_lambda(lambda)?;
    let mut out = vec![0.0; lambda];
    write_positional_encoding(pos, &mut out);
    Ok(out)
}

fn write_positional_encoding(pos: usize, out: &mut [f64]) {
    let lambda = out.len() as f64;
    let pos = pos as f64;
    for (k, slot) in out.iter_mut().enumerate() {
        let angle = pos / 10000f64.powf(2.0 * k as f64 / lambda);
        *slot = if k % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

/// Surface embedding of a document plus its unit direction. `unit` is `None`
/// when the vector is exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEmbedding {
    vector: Vec<f64>,
    unit: Option<Vec<f64>>,
}

impl SurfaceEmbedding {
    pub fn from_vector(vector: Vec<f64>) -> Self {
        let norm = dot(&vector, &vector).sqrt();
        let unit = (norm > 0.0 && norm.is_finite())
            .then(|| vector.iter().map(|x| x / norm).collect());
        Self { vector, unit }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn unit(&self) -> Option<&[f64]> {
        self.unit.as_deref()
    }

    pub fn is_zero(&self) -> bool {
        self.unit.is_none()
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }
}

pub type EmbeddingMap = HashMap<String, SurfaceEmbedding>;

/// Embeds a raw token sequence against `stats`.
pub fn embed_tokens<F: DocumentFrequency + ?Sized>(
    id: &str,
    tokens: &[String],
    stats: &F,
    lambda: usize,
) -> Result<SurfaceEmbedding, SurfaceError> {
    check_lambda(lambda)?;
    if tokens.len() < 2 {
        return Err(SurfaceError::DegenerateDocument {
            id: id.to_string(),
            tokens: tokens.len(),
        });
    }
    let mut significance: HashMap<&str, f64> = HashMap::new();
    let mut vector = vec![0.0; lambda];
    let mut code = vec![0.0; lambda];
    for (pos, token) in tokens.iter().enumerate() {
        let s = match significance.get(token.as_str()) {
            Some(s) => *s,
            None => {
                let s = token_significance(token, tokens, stats)?;
                significance.insert(token, s);
                s
            }
        };
        if s == 0.0 {
            continue;
        }
        write_positional_encoding(pos, &mut code);
        for (acc, c) in vector.iter_mut().zip(&code) {
            *acc += s * c;
        }
    }
    let denominator = (tokens.len() - 1) as f64;
    vector.iter_mut().for_each(|x| *x /= denominator);
    Ok(SurfaceEmbedding::from_vector(vector))
}

pub fn surface_embedding<F: DocumentFrequency + ?Sized>(
    doc: &LabeledDocument,
    stats: &F,
    lambda: usize,
) -> Result<SurfaceEmbedding, SurfaceError> {
    embed_tokens(doc.id(), doc.tokens(), stats, lambda)
}

/// Embeds every document with at least two tokens. Shorter documents are
/// left out of the map and therefore out of every score.
pub fn embed_dataset(
    dataset: &Dataset,
    stats: &CorpusStats,
    lambda: usize,
) -> Result<EmbeddingMap, SurfaceError> {
    check_lambda(lambda)?;
    let results: Vec<_> = dataset
        .documents()
        .par_iter()
        .filter(|doc| doc.len() >= 2)
        .map(|doc| surface_embedding(doc, stats, lambda).map(|e| (doc.id().to_string(), e)))
        .collect();
    results.into_iter().collect()
}

/// Ids of all documents whose label differs from `doc`'s, in dataset order.
pub fn opposite_set(doc: &LabeledDocument, dataset: &Dataset) -> Result<Vec<String>, SurfaceError> {
    let ids: Vec<String> = dataset
        .documents()
        .iter()
        .filter(|d| d.label() != doc.label())
        .map(|d| d.id().to_string())
        .collect();
    if ids.is_empty() {
        return Err(SurfaceError::NoContrast(doc.id().to_string()));
    }
    Ok(ids)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct ClassSum {
    sum: Vec<f64>,
    count: usize,
}

/// Per-class sums of unit embeddings over the non-zero embedded documents.
///
/// Classes that occur in the dataset but have no non-zero embedding are kept
/// with a zero count so the objective can report them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSums {
    lambda: usize,
    classes: BTreeMap<ClassId, ClassSum>,
}

impl ClassSums {
    pub fn build(dataset: &Dataset, embeddings: &EmbeddingMap, lambda: usize) -> Result<Self, SurfaceError> {
        let mut classes: BTreeMap<ClassId, ClassSum> = dataset
            .present_labels()
            .into_iter()
            .map(|c| {
                (
                    c,
                    ClassSum {
                        sum: vec![0.0; lambda],
                        count: 0,
                    },
                )
            })
            .collect();
        for doc in dataset.documents() {
            let Some(unit) = embeddings.get(doc.id()).and_then(SurfaceEmbedding::unit) else {
                continue;
            };
            if unit.len() != lambda {
                return Err(SurfaceError::DimensionMismatch {
                    expected: lambda,
                    found: unit.len(),
                });
            }
            let class = classes.get_mut(&doc.label()).expect("label present");
            class.sum.iter_mut().zip(unit).for_each(|(s, u)| *s += u);
            class.count += 1;
        }
        Ok(Self { lambda, classes })
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.classes.get(&class).map_or(0, |c| c.count)
    }

    /// Sum of unit vectors over every class except `class`, and how many
    /// documents contributed.
    pub fn opposite_sum(&self, class: ClassId) -> (Vec<f64>, usize) {
        let mut sum = vec![0.0; self.lambda];
        let mut count = 0;
        for (c, s) in &self.classes {
            if *c == class {
                continue;
            }
            sum.iter_mut().zip(&s.sum).for_each(|(a, b)| *a += b);
            count += s.count;
        }
        (sum, count)
    }

    /// `1 - mean cosine` between `unit` and every opposite-class unit vector.
    pub fn score_unit(&self, id: &str, class: ClassId, unit: &[f64]) -> Result<f64, SurfaceError> {
        let (sum, count) = self.opposite_sum(class);
        if count == 0 {
            return Err(SurfaceError::NoContrast(id.to_string()));
        }
        Ok(1.0 - dot(unit, &sum) / count as f64)
    }

    /// Sum over unordered class pairs of the dot product of their unit sums,
    /// i.e. the total cross-class cosine similarity.
    pub fn objective(&self) -> Result<f64, SurfaceError> {
        if let Some((class, _)) = self.classes.iter().find(|(_, s)| s.count == 0) {
            return Err(SurfaceError::ObjectiveUndefined(*class));
        }
        let sums: Vec<&ClassSum> = self.classes.values().collect();
        let mut total = 0.0;
        for (i, a) in sums.iter().enumerate() {
            for b in &sums[i + 1..] {
                total += dot(&a.sum, &b.sum);
            }
        }
        Ok(total)
    }

    /// Largest value the objective can take with the current class sizes:
    /// the number of cross-class document pairs.
    pub fn ceiling(&self) -> f64 {
        let counts: Vec<usize> = self.classes.values().map(|c| c.count).collect();
        let mut pairs = 0usize;
        for (i, a) in counts.iter().enumerate() {
            pairs += counts[i + 1..].iter().map(|b| a * b).sum::<usize>();
        }
        pairs as f64
    }

    /// Swaps one document's unit vector inside its class sum.
    pub fn replace(&mut self, class: ClassId, old_unit: &[f64], new_unit: &[f64]) {
        if let Some(c) = self.classes.get_mut(&class) {
            for ((s, o), n) in c.sum.iter_mut().zip(old_unit).zip(new_unit) {
                *s += n - o;
            }
        }
    }
}

/// Shortcut score of `doc`: one minus its mean cosine similarity to every
/// differently-labeled document with a non-zero embedding. Range `[0, 2]`.
pub fn shortcut_score(
    doc: &LabeledDocument,
    dataset: &Dataset,
    embeddings: &EmbeddingMap,
) -> Result<f64, SurfaceError> {
    let embedding = embeddings
        .get(doc.id())
        .ok_or_else(|| SurfaceError::MissingEmbedding(doc.id().to_string()))?;
    let unit = embedding
        .unit()
        .ok_or_else(|| SurfaceError::ZeroEmbedding(doc.id().to_string()))?;
    opposite_set(doc, dataset)?;
    let sums = ClassSums::build(dataset, embeddings, embedding.dimension())?;
    sums.score_unit(doc.id(), doc.label(), unit)
}

/// Shortcut scores for every document; `None` where the score is undefined
/// (too short, zero embedding, or nothing to contrast against).
pub fn shortcut_scores(
    dataset: &Dataset,
    embeddings: &EmbeddingMap,
    lambda: usize,
) -> Result<Vec<(String, Option<f64>)>, SurfaceError> {
    let sums = ClassSums::build(dataset, embeddings, lambda)?;
    let opposite: BTreeMap<ClassId, (Vec<f64>, usize)> = dataset
        .present_labels()
        .into_iter()
        .map(|c| (c, sums.opposite_sum(c)))
        .collect();
    Ok(dataset
        .documents()
        .iter()
        .map(|doc| {
            let score = embeddings.get(doc.id()).and_then(SurfaceEmbedding::unit).and_then(|unit| {
                let (sum, count) = &opposite[&doc.label()];
                (*count > 0).then(|| 1.0 - dot(unit, sum) / *count as f64)
            });
            (doc.id().to_string(), score)
        })
        .collect())
}

/// Total cosine similarity between surface embeddings of differently
/// labeled documents, summed over unordered class pairs.
pub fn class_alignment_objective(dataset: &Dataset, embeddings: &EmbeddingMap) -> Result<f64, SurfaceError> {
    let lambda = embeddings.values().next().map_or(DEFAULT_LAMBDA, SurfaceEmbedding::dimension);
    ClassSums::build(dataset, embeddings, lambda)?.objective()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelFormat, LabelSet, Schema, TokenizerConfig};
    use approx::assert_abs_diff_eq;

    fn dataset(texts: &[(&str, u32)]) -> Dataset {
        let cfg = TokenizerConfig::default();
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, (t, l))| LabeledDocument::new(format!("d{}", i + 1), *t, None, ClassId(*l), &cfg).unwrap())
            .collect();
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        Dataset::new(
            docs,
            LabelSet::from_names(names).unwrap(),
            Schema::Single,
            LabelFormat::Numeric,
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn tfidf_examples() {
        let ds = dataset(&[("a b", 0), ("a a c", 1)]);
        let stats = CorpusStats::build(&ds, 0);
        let d1 = &ds.documents()[0];
        // (1/2) * ln(2/1)
        assert_abs_diff_eq!(tfidf_score("b", d1, &stats).unwrap(), 0.34657359027997264, epsilon = 1e-15);
        assert_eq!(tfidf_score("a", d1, &stats).unwrap(), 0.0);
        assert_eq!(tfidf_score("zzz", d1, &stats).unwrap(), 0.0);
    }

    #[test]
    fn stale_stats_detected() {
        let ds = dataset(&[("a b", 0), ("a c", 1)]);
        let stats = CorpusStats::build(&ds, 0);
        let other = dataset(&[("q r", 0), ("a c", 1)]);
        let err = tfidf_score("q", &other.documents()[0], &stats).unwrap_err();
        assert_eq!(err, SurfaceError::StaleStats("q".into()));
    }

    #[test]
    fn positional_examples() {
        assert_eq!(positional_encoding(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(positional_encoding(1, 2).unwrap()[0], 0.8414709848078965, epsilon = 1e-15);
        assert_abs_diff_eq!(positional_encoding(1, 4).unwrap()[1], 0.9999500004166653, epsilon = 1e-15);
        assert_eq!(positional_encoding(3, 5), Err(SurfaceError::InvalidDimension(5)));
        assert_eq!(positional_encoding(3, 0), Err(SurfaceError::InvalidDimension(0)));
    }

    #[test]
    fn degenerate_and_zero_embeddings() {
        let ds = dataset(&[("solo", 0), ("x y", 1), ("x y", 0)]);
        let stats = CorpusStats::build(&ds, 0);
        let err = surface_embedding(&ds.documents()[0], &stats, 8).unwrap_err();
        assert!(matches!(err, SurfaceError::DegenerateDocument { tokens: 1, .. }));

        let ds = dataset(&[("x y", 0), ("y x", 1)]);
        let stats = CorpusStats::build(&ds, 0);
        let e = surface_embedding(&ds.documents()[0], &stats, 8).unwrap();
        assert!(e.is_zero());
        let map = embed_dataset(&ds, &stats, 8).unwrap();
        assert_eq!(
            shortcut_score(&ds.documents()[0], &ds, &map),
            Err(SurfaceError::ZeroEmbedding("d1".into()))
        );
        assert!(matches!(
            class_alignment_objective(&ds, &map),
            Err(SurfaceError::ObjectiveUndefined(_))
        ));
    }

    #[test]
    fn two_token_embedding_matches_hand_values() {
        // independently evaluated: x=[red car], y=[blue car fast], z=[red bike slow], lambda=4
        let ds = dataset(&[("red car", 0), ("blue car fast", 1), ("red bike slow", 0)]);
        let stats = CorpusStats::build(&ds, 0);
        let expected = [
            [0.17059356191250866, 0.40545497156493326, 2.027325537161946e-05, 0.405465108108063],
            [0.22335874183166707, 0.43374161620402873, 4.337816116867408e-05, 0.4337816142403306],
            [0.3205692819387661, 0.4337358400256591, 5.4930614158752416e-05, 0.43378161424027284],
        ];
        for (doc, want) in ds.documents().iter().zip(expected) {
            let got = surface_embedding(doc, &stats, 4).unwrap();
            for (g, w) in got.vector().iter().zip(want) {
                assert_abs_diff_eq!(*g, w, epsilon = 1e-12);
            }
            let n: f64 = got.unit().unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn opposite_set_cases() {
        let ds = dataset(&[("a b", 0), ("c d", 1), ("e f", 2), ("g h", 1)]);
        assert_eq!(opposite_set(&ds.documents()[1], &ds).unwrap(), ["d1", "d3"]);
        assert_eq!(opposite_set(&ds.documents()[0], &ds).unwrap(), ["d2", "d3", "d4"]);
    }

    #[test]
    fn score_extremes() {
        let ds = dataset(&[("a b", 0), ("c d", 1)]);
        let mut map = EmbeddingMap::new();
        map.insert("d1".into(), SurfaceEmbedding::from_vector(vec![1.0, 2.0]));
        map.insert("d2".into(), SurfaceEmbedding::from_vector(vec![2.0, 4.0]));
        assert_abs_diff_eq!(shortcut_score(&ds.documents()[0], &ds, &map).unwrap(), 0.0, epsilon = 1e-12);
        map.insert("d2".into(), SurfaceEmbedding::from_vector(vec![-1.0, -2.0]));
        assert_abs_diff_eq!(shortcut_score(&ds.documents()[0], &ds, &map).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn objective_extremes() {
        let ds = dataset(&[("a b", 0), ("c d", 0), ("e f", 1), ("g h", 1), ("i j", 1)]);
        let mut map = EmbeddingMap::new();
        for id in ["d1", "d2", "d3", "d4", "d5"] {
            map.insert(id.into(), SurfaceEmbedding::from_vector(vec![0.3, 0.4]));
        }
        assert_abs_diff_eq!(class_alignment_objective(&ds, &map).unwrap(), 6.0, epsilon = 1e-12);
        for id in ["d3", "d4", "d5"] {
            map.insert(id.into(), SurfaceEmbedding::from_vector(vec![-0.4, 0.3]));
        }
        assert_abs_diff_eq!(class_alignment_objective(&ds, &map).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn replacement_stats_adjust_frequencies() {
        let ds = dataset(&[("a b", 0), ("a c", 1), ("b c", 1)]);
        let stats = CorpusStats::build(&ds, 0);
        let orig = ds.documents()[0].tokens().to_vec();
        let cand = vec!["a".to_string(), "z".to_string()];
        let view = stats.with_replacement(&orig, &cand);
        assert_eq!(view.doc_frequency("a"), Some(2));
        assert_eq!(view.doc_frequency("b"), Some(1));
        assert_eq!(view.doc_frequency("z"), Some(1));
        assert_eq!(view.doc_frequency("q"), None);
    }
}
