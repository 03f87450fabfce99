//! Unsupervised dataset debiasing.
//!
//! Documents are embedded in a surface space (TF-IDF weighted sinusoidal
//! position codes), scored by how far they sit from the opposite classes,
//! and the worst offenders are rewritten by a language model under a label
//! check until the classes stop drifting apart.

pub mod attribution;
pub mod corpus;
pub mod evalkit;
pub mod pipeline;
pub mod rewriter;
pub mod surface;

pub use attribution::{is_shortcut, lemma1_holds, AttributionRecord, ShortcutCondition, ShortcutVerdict};
pub use corpus::{load_dataset, save_dataset, ClassId, Dataset, LabelSet, LabeledDocument, Schema, TokenizerConfig};
pub use evalkit::{corpus_bleu, count_terms, emit_report, frequency_gap, generate_biased_corpus, BiasReport, BiasSpec};
pub use pipeline::{run_iteration, run_razor, Checkpoint, IterationTrace, Razor, RunConfig, StopReason, TopK};
pub use rewriter::{GeneratorConfig, RewriteBackend};
pub use surface::{
    class_alignment_objective, positional_encoding, shortcut_score, surface_embedding, tfidf_score, CorpusStats,
    SurfaceEmbedding,
};
