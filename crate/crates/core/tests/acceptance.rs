//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use razor_core::attribution::{is_shortcut, lemma1_holds, AttributionRecord, ShortcutCondition, SubsetPrediction};
use razor_core::corpus::{
    write_dataset, ClassId, Dataset, LabelFormat, LabelSet, LabeledDocument, Schema, TokenizerConfig,
};
use razor_core::evalkit::{corpus_bleu, count_terms, frequency_gap, generate_biased_corpus, objective_trace, BiasSpec};
use razor_core::pipeline::{Checkpoint, PipelineError, Razor, RunConfig, RunOutcome, TopK};
use razor_core::rewriter::mock::{MockBackend, MockRule, MockRules};
use razor_core::surface::{
    class_alignment_objective, embed_dataset, positional_encoding, shortcut_scores, tfidf_score, CorpusStats,
    SurfaceEmbedding,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// Every pipeline run in this suite is recorded here for the size/label check.
static RUNS: Mutex<Vec<(String, Dataset, Dataset)>> = Mutex::new(Vec::new());

fn record_run(name: &str, input: &Dataset, output: &Dataset) {
    RUNS.lock().unwrap().push((name.to_string(), input.clone(), output.clone()));
}

fn run(name: &str, dataset: &Dataset, config: &RunConfig, backend: &MockBackend) -> RunOutcome {
    let outcome = Razor::new(config.clone(), backend).unwrap().run(dataset).unwrap();
    record_run(name, dataset, &outcome.dataset);
    outcome
}

fn quiet_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.generator.retry_backoff_ms = 0;
    config
}

fn random_corpus(rng: &mut ChaCha8Rng, classes: u32) -> Dataset {
    const VOCAB: [&str; 24] = [
        "alpha", "beta", "gamma", "delta", "not", "no", "river", "stone", "light", "dark", "city", "field", "red",
        "blue", "old", "new", "runs", "sits", "is", "was", "a", "the", "of", "in",
    ];
    let tokenizer = TokenizerConfig::default();
    let n = rng.random_range(10..=200);
    let docs = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=14);
            let text: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
            let label = if (i as u32) < classes { i as u32 } else { rng.random_range(0..classes) };
            LabeledDocument::new(format!("r{i:03}"), text.join(" "), None, ClassId(label), &tokenizer).unwrap()
        })
        .collect();
    let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
    Dataset::new(docs, LabelSet::from_names(names).unwrap(), Schema::Single, LabelFormat::Numeric, tokenizer).unwrap()
}

fn naive_cos(a: &SurfaceEmbedding, b: &SurfaceEmbedding) -> f64 {
    let (a, b) = (a.vector(), b.vector());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for corpus in 0..50 {
        let ds = random_corpus(&mut rng, 2);
        let stats = CorpusStats::build(&ds, 0);
        let emb = embed_dataset(&ds, &stats, 64).map_err(|e| e.to_string())?;
        let scored: Vec<&LabeledDocument> =
            ds.documents().iter().filter(|d| emb.get(d.id()).is_some_and(|e| !e.is_zero())).collect();

        let mut naive_objective = 0.0;
        for (i, a) in scored.iter().enumerate() {
            for b in &scored[i + 1..] {
                if a.label() != b.label() {
                    naive_objective += naive_cos(&emb[a.id()], &emb[b.id()]);
                }
            }
        }
        let fast = class_alignment_objective(&ds, &emb).map_err(|e| e.to_string())?;
        ensure!(rel_close(fast, naive_objective, 1e-9), "corpus {corpus}: objective {fast} vs naive {naive_objective}");
        worst = worst.max((fast - naive_objective).abs() / naive_objective.abs().max(1.0));

        let fast_scores: HashMap<String, Option<f64>> =
            shortcut_scores(&ds, &emb, 64).map_err(|e| e.to_string())?.into_iter().collect();
        for d in &scored {
            let opposite: Vec<f64> = scored
                .iter()
                .filter(|o| o.label() != d.label())
                .map(|o| naive_cos(&emb[d.id()], &emb[o.id()]))
                .collect();
            let naive = 1.0 - opposite.iter().sum::<f64>() / opposite.len() as f64;
            let fast = fast_scores[d.id()].ok_or_else(|| format!("corpus {corpus}: {} unscored", d.id()))?;
            ensure!(rel_close(fast, naive, 1e-9), "corpus {corpus} doc {}: score {fast} vs naive {naive}", d.id());
            ensure!((0.0..=2.0 + 1e-12).contains(&fast), "score out of range: {fast}");
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("50 corpora, worst relative deviation {worst:.1e}, {elapsed:.2?}"))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for lambda in [8usize, 64] {
        ensure!(
            positional_encoding(0, lambda).unwrap() == (0..lambda).map(|k| (k % 2) as f64).collect::<Vec<_>>(),
            "position 0 is not [0, 1, 0, 1, ...] for lambda {lambda}"
        );
        for pos in 0..512usize {
            let got = positional_encoding(pos, lambda).map_err(|e| e.to_string())?;
            for (k, value) in got.iter().enumerate() {
                // Independent evaluation: frequency via exp/ln instead of powf.
                let rate = (-(2.0 * k as f64 / lambda as f64) * 10000f64.ln()).exp();
                let angle = pos as f64 * rate;
                let want = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                worst = worst.max((value - want).abs());
            }
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    ensure!(positional_encoding(3, 7).is_err(), "odd lambda accepted");
    Ok(format!("pos 0..512, lambda 8 and 64, max deviation {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let tokenizer = TokenizerConfig::default();
    let texts = ["the cat sat on the mat", "the dog did not sit", "a cat is not a dog", "no dog sat here", "the mat is red"];
    let docs: Vec<LabeledDocument> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| LabeledDocument::new(format!("d{}", i + 1), *t, None, ClassId((i % 2) as u32), &tokenizer).unwrap())
        .collect();
    let ds = Dataset::new(docs, LabelSet::from_names(["a", "b"]).unwrap(), Schema::Single, LabelFormat::Numeric, tokenizer)
        .unwrap();
    let stats = CorpusStats::build(&ds, 0);
    // Produced by an independent script before the implementation existed.
    let frozen = [
        ("the", "d1", 0.1702752079219969),
        ("cat", "d1", 0.15271512197902584),
        ("mat", "d1", 0.15271512197902584),
        ("not", "d2", 0.18325814637483104),
        ("a", "d3", 0.5364793041447),
        ("dog", "d4", 0.12770640594149768),
        ("here", "d4", 0.40235947810852507),
        ("red", "d5", 0.40235947810852507),
        ("dog", "d1", 0.0),
    ];
    let mut worst = 0.0f64;
    for (token, doc, want) in frozen {
        let got = tfidf_score(token, ds.get(doc).unwrap(), &stats).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= 1e-12, "S({token}, {doc}) = {got}, expected {want}");
        worst = worst.max((got - want).abs());
    }
    Ok(format!("{} frozen values, max deviation {worst:.1e}", frozen.len()))
}

fn noisy_rules(seed: u64) -> MockRules {
    // Mixes the debiasing deletion with rewrites that may raise the score,
    // so the strict-improvement gate has something to reject.
    let rule = |p: &str, r: &str| MockRule {
        pattern: p.into(),
        replacement: r.into(),
    };
    MockRules {
        seed,
        rules: vec![
            rule(r"\bnot\b", ""),
            rule(r"^the (\w+)", "a $1"),
            rule(r"\bin (\w+)", "in $1 and more"),
            rule(r"\bwas\b", "was not"),
        ],
        ..Default::default()
    }
}

fn criterion_4() -> Outcome {
    let mut checked = 0;
    for seed in 0..4u64 {
        let (ds, plain) = generate_biased_corpus(&BiasSpec {
            seed,
            corpus_size: 400,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        for (name, rules) in [("plain", plain), ("noisy", noisy_rules(seed))] {
            let backend = MockBackend::new(rules).map_err(|e| e.to_string())?;
            let outcome = run(&format!("monotone-{name}-{seed}"), &ds, &quiet_config(), &backend);
            for t in &outcome.traces {
                ensure!(
                    t.objective_after >= t.objective_before - 1e-9,
                    "seed {seed} {name} iteration {}: {} -> {}",
                    t.iteration,
                    t.objective_before,
                    t.objective_after
                );
                checked += 1;
            }
            let sequence = objective_trace(&outcome.traces);
            ensure!(
                sequence.windows(2).all(|w| w[1] >= w[0] - 1e-9),
                "seed {seed} {name}: objective sequence decreases: {sequence:?}"
            );
        }
    }
    Ok(format!("{checked} iterations over 8 runs, all non-decreasing"))
}

fn criterion_5() -> Outcome {
    let (ds, rules) = generate_biased_corpus(&BiasSpec::default()).map_err(|e| e.to_string())?;
    let backend = MockBackend::new(rules).map_err(|e| e.to_string())?;
    let config = RunConfig {
        k: TopK::Fraction(0.1),
        max_iterations: 10,
        ..quiet_config()
    };
    let started = Instant::now();
    let outcome = run("synthetic-1000", &ds, &config, &backend);
    let elapsed = started.elapsed();
    let gap_before = frequency_gap(&ds, "not");
    let gap_after = frequency_gap(&outcome.dataset, "not");
    let count_before = count_terms(&ds, &["not"]).map_err(|e| e.to_string())?["not"].total as f64;
    let count_after = count_terms(&outcome.dataset, &["not"]).map_err(|e| e.to_string())?["not"].total as f64;
    let gap_drop = 1.0 - gap_after / gap_before;
    let count_drop = 1.0 - count_after / count_before;
    ensure!(outcome.traces.len() <= 10, "{} iterations", outcome.traces.len());
    ensure!(gap_drop >= 0.5, "gap {gap_before:.3} -> {gap_after:.3} ({:.0}%)", gap_drop * 100.0);
    ensure!(count_drop >= 0.4, "count {count_before} -> {count_after} ({:.0}%)", count_drop * 100.0);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "gap {gap_before:.3} -> {gap_after:.3} (-{:.0}%), count {count_before} -> {count_after} (-{:.0}%), {} iterations, {}, {elapsed:.2?}",
        gap_drop * 100.0,
        count_drop * 100.0,
        outcome.traces.len(),
        outcome.stop_reason
    ))
}

fn criterion_6() -> Outcome {
    // Extra runs: three classes, and a verifier that rejects everything.
    let (three, rules) = generate_biased_corpus(&BiasSpec {
        num_classes: 3,
        corpus_size: 300,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    run("three-class", &three, &quiet_config(), &MockBackend::new(rules.clone()).unwrap());
    let flip = MockRules {
        verdict: razor_core::rewriter::mock::VerdictPolicy::Flip,
        ..rules
    };
    let outcome = run("all-rejected", &three, &quiet_config(), &MockBackend::new(flip).unwrap());
    ensure!(outcome.dataset == three, "rejected candidates changed the dataset");

    let runs = RUNS.lock().unwrap();
    for (name, input, output) in runs.iter() {
        ensure!(input.len() == output.len(), "{name}: size {} -> {}", input.len(), output.len());
        let labels = |d: &Dataset| {
            let mut m: BTreeMap<ClassId, usize> = BTreeMap::new();
            d.documents().iter().for_each(|doc| *m.entry(doc.label()).or_default() += 1);
            m
        };
        ensure!(labels(input) == labels(output), "{name}: label multiset changed");
        for (a, b) in input.documents().iter().zip(output.documents()) {
            ensure!(a.id() == b.id() && a.label() == b.label(), "{name}: document {} moved or relabeled", a.id());
        }
    }
    Ok(format!("{} pipeline runs, sizes and label multisets preserved", runs.len()))
}

fn lemma_record(rng: &mut ChaCha8Rng, id: usize) -> (AttributionRecord, Vec<usize>) {
    let len = rng.random_range(2..=24);
    let dim = rng.random_range(1..=16);
    let subset_size = rng.random_range(1..=len / 2);
    let mut positions: Vec<usize> = (0..len).collect();
    for i in 0..subset_size {
        let j = rng.random_range(i..len);
        positions.swap(i, j);
    }
    let mut subset = positions[..subset_size].to_vec();
    subset.sort_unstable();

    let random_vec = |rng: &mut ChaCha8Rng, norm: f64| {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x * norm / n).collect::<Vec<f64>>()
    };
    let mut vectors = vec![Vec::new(); len];
    let mut max_complement = 0.0f64;
    for (p, v) in vectors.iter_mut().enumerate() {
        if !subset.contains(&p) {
            let norm = rng.random_range(0.0..3.0);
            max_complement = max_complement.max(norm);
            *v = random_vec(rng, norm);
        }
    }
    // Subset vectors share one direction and are at least as long as any
    // complement vector.
    let direction = random_vec(rng, 1.0);
    for &p in &subset {
        let norm = max_complement + rng.random_range(0.0..2.0);
        vectors[p] = direction.iter().map(|x| x * norm).collect();
    }
    let predicted = ClassId(1);
    let record = AttributionRecord {
        doc_id: format!("rec{id}"),
        token_attributions: vectors,
        predicted_full: predicted,
        true_label: ClassId(0),
        subsets: vec![SubsetPrediction {
            positions: subset.clone(),
            predicted,
        }],
    };
    (record, subset)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let (record, subset) = lemma_record(&mut rng, i);
        let verdict = is_shortcut(&subset, &record).map_err(|e| e.to_string())?;
        ensure!(verdict.is_shortcut, "record {i}: not a shortcut ({:?})", verdict.failed);
        ensure!(lemma1_holds(&subset, &record).map_err(|e| e.to_string())?, "record {i}: inequality fails");
    }

    let (base, subset) = lemma_record(&mut rng, 1000);
    let mut not_preserved = base.clone();
    not_preserved.subsets[0].predicted = ClassId(2);
    let mut correct = base.clone();
    correct.true_label = correct.predicted_full;
    let mut too_large = base.clone();
    let big: Vec<usize> = (0..base.len() / 2 + 1).collect();
    too_large.subsets = vec![SubsetPrediction {
        positions: big.clone(),
        predicted: base.predicted_full,
    }];
    let cases = [
        (not_preserved, subset.clone(), ShortcutCondition::PredictionNotPreserved),
        (correct, subset.clone(), ShortcutCondition::PredictionCorrect),
        (too_large, big, ShortcutCondition::SubsetTooLarge),
    ];
    for (record, positions, expected) in cases {
        let verdict = is_shortcut(&positions, &record).map_err(|e| e.to_string())?;
        ensure!(
            !verdict.is_shortcut && verdict.failed == Some(expected),
            "expected failure {expected:?}, got {verdict:?}"
        );
    }
    Ok("1000 constructed shortcuts satisfy the inequality; 3 single-condition failures reported correctly".into())
}

/// Second BLEU scorer: n-grams as joined strings, per-sentence dictionaries,
/// brevity penalty from summed lengths.
fn reference_bleu(cands: &[String], refs: &[String]) -> f64 {
    let mut hits = [0f64; 4];
    let mut total = [0f64; 4];
    let (mut c_len, mut r_len) = (0f64, 0f64);
    for (c, r) in cands.iter().zip(refs) {
        let c: Vec<&str> = c.split(' ').filter(|s| !s.is_empty()).collect();
        let r: Vec<&str> = r.split(' ').filter(|s| !s.is_empty()).collect();
        c_len += c.len() as f64;
        r_len += r.len() as f64;
        for n in 1..=4 {
            let grams = |t: &[&str]| {
                let mut m: BTreeMap<String, f64> = BTreeMap::new();
                for i in 0..t.len().saturating_sub(n - 1) {
                    *m.entry(t[i..i + n].join("\u{1}")).or_default() += 1.0;
                }
                m
            };
            let (cg, rg) = (grams(&c), grams(&r));
            for (g, count) in &cg {
                hits[n - 1] += count.min(*rg.get(g).unwrap_or(&0.0));
                total[n - 1] += count;
            }
        }
    }
    let log_mean = (0..4).map(|i| (hits[i] / total[i]).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    100.0 * bp * log_mean.exp()
}

fn criterion_8() -> Outcome {
    const WORDS: [&str; 12] = ["the", "a", "cat", "dog", "sat", "ran", "on", "mat", "red", "big", "fast", "home"];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(4..=16);
        (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut refs = Vec::new();
    let mut cands = Vec::new();
    for _ in 0..50 {
        let r = sentence(&mut rng);
        // Candidates are perturbed copies so every order has matches.
        let mut c: Vec<&str> = r.split(' ').collect();
        for _ in 0..rng.random_range(0..3) {
            let i = rng.random_range(0..c.len());
            c[i] = WORDS[rng.random_range(0..WORDS.len())];
        }
        if rng.random_bool(0.3) {
            c.push("extra");
        }
        if rng.random_bool(0.3) && c.len() > 4 {
            c.pop();
        }
        cands.push(c.join(" "));
        refs.push(r);
    }
    let ours = corpus_bleu(&cands, &refs, 4, false).map_err(|e| e.to_string())?;
    let theirs = reference_bleu(&cands, &refs);
    ensure!((ours - theirs).abs() <= 1e-6, "{ours} vs {theirs}");
    let identity = corpus_bleu(&refs, &refs, 4, false).map_err(|e| e.to_string())?;
    ensure!(identity == 100.0, "BLEU(X, X) = {identity}");
    let frozen = corpus_bleu(
        &[
            "the cat sat on the mat today",
            "a dog barked at the mailman loudly",
            "it is raining in the city",
            "she did not go to the market",
        ],
        &[
            "the cat sat on the mat",
            "the dog barked at the mailman",
            "it was raining in the old city",
            "she went to the market",
        ],
        4,
        false,
    )
    .map_err(|e| e.to_string())?;
    ensure!((frozen - 50.70635006750304).abs() <= 1e-6, "frozen corpus: {frozen}");
    Ok(format!("50 pairs: {ours:.6} vs {theirs:.6}; BLEU(X,X) = 100; frozen corpus {frozen:.6}"))
}

fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_dataset(ds, &mut out).unwrap();
    out
}

fn criterion_9() -> Outcome {
    let spec = BiasSpec {
        seed: 9,
        corpus_size: 600,
        ..Default::default()
    };
    let (ds, rules) = generate_biased_corpus(&spec).map_err(|e| e.to_string())?;
    let config = quiet_config();

    let reference_backend = MockBackend::new(rules.clone()).unwrap();
    let reference = run("determinism-a", &ds, &config, &reference_backend);
    let again = run("determinism-b", &ds, &config, &MockBackend::new(rules.clone()).unwrap());
    ensure!(dataset_bytes(&reference.dataset) == dataset_bytes(&again.dataset), "two seeded runs differ");
    ensure!(reference.traces.len() >= 2, "run too short to abort mid-way");

    // Abort half-way through the second iteration.
    let first = &reference.traces[0].llm_calls;
    let second = &reference.traces[1].llm_calls;
    let limit = first.generation + first.verification + (second.generation + second.verification) / 2;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let failing = MockBackend::new(MockRules {
        fail_after_calls: Some(limit),
        ..rules.clone()
    })
    .unwrap();
    let aborted = Razor::new(config.clone(), &failing)
        .unwrap()
        .with_checkpoint(Checkpoint::open(dir.path()).unwrap())
        .run(&ds);
    let failed_iteration = match aborted {
        Err(PipelineError::Backend { iteration, .. }) => iteration,
        other => return Err(format!("expected a backend abort, got {:?}", other.map(|o| o.stop_reason))),
    };
    ensure!(failed_iteration == 2, "aborted in iteration {failed_iteration}");
    let checkpoint = Checkpoint::open(dir.path()).unwrap();
    let completed: Vec<String> = checkpoint.load_progress(2).map_err(|e| e.to_string())?.into_keys().collect();
    ensure!(!completed.is_empty(), "no documents completed before the abort");

    let resumed_backend = MockBackend::new(rules).unwrap();
    let resumed = Razor::new(config, &resumed_backend)
        .unwrap()
        .with_checkpoint(checkpoint)
        .run(&ds)
        .map_err(|e| e.to_string())?;
    record_run("resumed", &ds, &resumed.dataset);
    ensure!(
        dataset_bytes(&resumed.dataset) == dataset_bytes(&reference.dataset),
        "resumed run differs from uninterrupted run"
    );

    let resumed_iteration = &resumed.traces[1].llm_calls;
    let calls = resumed_backend.calls();
    let in_iteration = &calls[..(resumed_iteration.generation + resumed_iteration.verification) as usize];
    let repeated = in_iteration.iter().filter(|c| completed.contains(&c.doc_id)).count();
    ensure!(repeated == 0, "{repeated} repeated calls for completed documents");
    ensure!(
        resumed_iteration.cached_documents as usize == completed.len(),
        "cache served {} documents, {} were completed",
        resumed_iteration.cached_documents,
        completed.len()
    );
    Ok(format!(
        "identical reruns; aborted in iteration 2 after {} completed documents, resumed with 0 repeated calls",
        completed.len()
    ))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "fast objective and shortcut score equal naive pairwise sums", criterion_1),
        (2, "positional encoding matches independent evaluator", criterion_2),
        (3, "TF-IDF matches frozen oracle values", criterion_3),
        (4, "objective is non-decreasing (per iteration and over a run)", criterion_4),
        (5, "planted-token gap and count reduced on 1000-doc synthetic corpus", criterion_5),
        (7, "shortcut definition and attribution inequality suite", criterion_7),
        (8, "corpus BLEU matches independent scorer", criterion_8),
        (9, "determinism and checkpoint resume", criterion_9),
        (6, "dataset size and label multiset preserved", criterion_6),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut results: Vec<(usize, &str, Outcome)> = criteria
        .iter()
        .map(|(n, name, f)| {
            let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
                Err(e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
            (*n, *name, outcome)
        })
        .collect();
    let _ = panic::take_hook();
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {name} ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name} ({detail})");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
