//! `razor` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 backend failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use razor_core::attribution::{compare_masses, is_shortcut, load_attributions, AttributionError, AttributionRecord};
use razor_core::corpus::{load_dataset, save_dataset, ClassId, CorpusError, Dataset, LabelSet, Schema};
use razor_core::evalkit::{
    analyze, emit_report, generate_biased_corpus, write_embeddings, write_report_csv, write_report_json, BiasSpec,
    EvalError, ReportOptions,
};
use razor_core::pipeline::{Checkpoint, IterationTrace, PipelineError, Razor, RunConfig, TopK};
use razor_core::rewriter::http::HttpBackend;
use razor_core::rewriter::mock::{MockBackend, MockRules};
use razor_core::rewriter::{BackendKind, RewriteBackend, RewriteError};
use razor_core::surface::SurfaceError;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SurfaceError> for CliError {
    fn from(e: SurfaceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Usage(e.to_string()),
            PipelineError::Backend { .. } | PipelineError::Rewrite(RewriteError::Backend { .. }) => {
                CliError::Backend(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "razor", version, about = "Find and rewrite surface-level shortcut carriers in labeled text datasets")]
struct Cli {
    /// Worker threads; also caps concurrent backend requests. 0 = all cores.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank documents by shortcut score.
    Analyze(AnalyzeArgs),
    /// Run a single select-rewrite-replace iteration.
    Rewrite(PipelineArgs),
    /// Iterate until the cross-class objective converges.
    Run(PipelineArgs),
    /// Generate a synthetic corpus with a planted spurious token.
    Synth(SynthArgs),
    /// Compare a dataset before and after rewriting.
    Report(ReportArgs),
    /// Evaluate shortcut conditions and the attribution inequality.
    CheckShortcut(CheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemaArg {
    Single,
    ClaimEvidence,
    PremiseHypothesis,
}

impl From<SchemaArg> for Schema {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::Single => Schema::Single,
            SchemaArg::ClaimEvidence => Schema::ClaimEvidence,
            SchemaArg::PremiseHypothesis => Schema::PremiseHypothesis,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset in JSON Lines.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    schema: SchemaArg,
    /// Label names in class-id order, comma separated. Inferred when omitted.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64)]
    lambda: usize,
    /// Print only the N highest-scoring documents.
    #[arg(long)]
    top: Option<usize>,
    /// Write the full ranking here (JSON Lines); the summary goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write surface embeddings here (JSON Lines).
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run configuration (JSON). Flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Rules file for the mock backend.
    #[arg(long)]
    mock_rules: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Final dataset (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Iteration traces (JSON).
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Before/after report (JSON); a CSV copy is written next to it.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Terms counted in the report.
    #[arg(long, value_delimiter = ',', default_value = "no,not")]
    terms: Vec<String>,
    /// Documents per iteration: an integer count or a fraction of the dataset.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    lambda: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    candidates_per_doc: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "not")]
    planted_token: String,
    #[arg(long, default_value_t = 0)]
    biased_class: u32,
    #[arg(long, default_value_t = 0.9)]
    bias_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    background_rate: f64,
    #[arg(long, default_value_t = 1000)]
    corpus_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    num_classes: u32,
    /// Dataset output (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Mock rules output (JSON).
    #[arg(long)]
    rules_out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    schema: SchemaArg,
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// trace.json from a run, for the objective trace.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "no,not")]
    terms: Vec<String>,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    #[arg(long)]
    smoothing: bool,
    /// Score BLEU on at most this many randomly drawn rewritten pairs.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON output; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Attribution records (JSON Lines).
    #[arg(long)]
    attributions: PathBuf,
    /// Subsets to check, one `{"doc_id", "subset"}` object per line. Without
    /// it every subset listed in the records is checked.
    #[arg(long)]
    subset_file: Option<PathBuf>,
}

fn label_set(names: &Option<Vec<String>>) -> Result<Option<LabelSet>, CliError> {
    names
        .as_ref()
        .map(|n| LabelSet::from_names(n.iter().map(|s| s.trim().to_string())).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()
}

fn load(data: &DataArgs, labels: Option<&LabelSet>, config: &RunConfig) -> Result<Dataset, CliError> {
    Ok(load_dataset(&data.input, data.schema.into(), labels, &config.tokenizer)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::Data(e.to_string()))
}

fn analyze_cmd(args: &AnalyzeArgs) -> Result<(), CliError> {
    if args.lambda == 0 || args.lambda % 2 != 0 {
        return Err(CliError::Usage(format!("--lambda must be even and positive, got {}", args.lambda)));
    }
    if args.top == Some(0) {
        return Err(CliError::Usage("--top must be positive".into()));
    }
    let labels = label_set(&args.data.labels)?;
    let dataset = load(&args.data, labels.as_ref(), &RunConfig::default())?;
    let (rows, summary, embeddings) = analyze(&dataset, args.lambda)?;

    if let Some(path) = &args.out {
        let mut out = create(path)?;
        for row in &rows {
            serde_json::to_writer(&mut out, row).map_err(|e| io_error(path, e))?;
            writeln!(out).map_err(|e| io_error(path, e))?;
        }
        out.flush().map_err(|e| io_error(path, e))?;
    }
    if let Some(path) = &args.embeddings {
        write_embeddings(&dataset, &embeddings, create(path)?).map_err(|e| io_error(path, e))?;
    }
    if summary.unscored > 0 {
        log::warn!("{} document(s) could not be scored (fewer than 2 tokens or zero embedding)", summary.unscored);
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let shown: Box<dyn Iterator<Item = _>> = match (args.top, &args.out) {
        (Some(n), _) => Box::new(rows.iter().filter(|r| r.gamma.is_some()).take(n)),
        (None, None) => Box::new(rows.iter()),
        (None, Some(_)) => {
            drop(out);
            return print_json(&summary);
        }
    };
    for row in shown {
        serde_json::to_writer(&mut out, row).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(out).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn run_config(args: &PipelineArgs, jobs: usize) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(k) = args.k {
        config.k = if k >= 1.0 && k.fract() == 0.0 {
            TopK::Count(k as usize)
        } else {
            TopK::Fraction(k)
        };
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = args.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = &args.model {
        config.generator.model = v.clone();
    }
    if let Some(v) = args.candidates_per_doc {
        config.generator.candidates_per_doc = v;
    }
    if let Some(v) = args.temperature {
        config.generator.temperature = v;
    }
    if let Some(v) = args.top_p {
        config.generator.top_p = v;
    }
    if let Some(v) = args.max_retries {
        config.generator.max_retries = v;
    }
    if let Some(v) = args.timeout_secs {
        config.generator.timeout_secs = v;
    }
    match args.backend {
        Some(BackendArg::Mock) => config.generator.backend = BackendKind::Mock,
        Some(BackendArg::Http) => config.generator.backend = BackendKind::Http,
        None => {}
    }
    if let Some(labels) = &args.data.labels {
        config.labels = Some(labels.clone());
    }
    if jobs > 0 {
        config.jobs = jobs;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn backend(args: &PipelineArgs, config: &RunConfig) -> Result<Box<dyn RewriteBackend>, CliError> {
    match config.generator.backend {
        BackendKind::Mock => {
            let path = args
                .mock_rules
                .as_ref()
                .ok_or_else(|| CliError::Usage("the mock backend needs --mock-rules".into()))?;
            let rules = MockRules::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(Box::new(MockBackend::new(rules).map_err(|e| CliError::Usage(e.to_string()))?))
        }
        BackendKind::Http => {
            let timeout = Duration::from_secs(config.generator.timeout_secs);
            let backend = HttpBackend::from_env(config.generator.model.clone(), timeout)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(Box::new(backend))
        }
    }
}

fn pipeline_cmd(args: &PipelineArgs, jobs: usize, single: bool) -> Result<(), CliError> {
    let config = run_config(args, jobs)?;
    let labels = config
        .labels
        .as_ref()
        .map(|n| LabelSet::from_names(n.clone()).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    let backend = backend(args, &config)?;
    let dataset = load(&args.data, labels.as_ref(), &config)?;

    let mut razor = Razor::new(config.clone(), backend.as_ref())?;
    if let Some(dir) = &args.checkpoint_dir {
        razor = razor.with_checkpoint(Checkpoint::open(dir)?);
    }
    let (final_dataset, traces, stop_reason) = if single {
        let (next, trace) = razor.run_iteration(&dataset, 1)?;
        (next, vec![trace], None)
    } else {
        let outcome = razor.run(&dataset)?;
        (outcome.dataset, outcome.traces, Some(outcome.stop_reason))
    };

    save_dataset(&final_dataset, &args.out)?;
    if let Some(path) = &args.trace_out {
        write_json(path, &traces)?;
    }
    let terms: Vec<&str> = args.terms.iter().map(String::as_str).filter(|t| !t.is_empty()).collect();
    let report = emit_report(&dataset, &final_dataset, &traces, &terms, &ReportOptions::new())?;
    if let Some(path) = &args.report {
        write_report_json(&report, path)?;
        let csv_path = path.with_extension("csv");
        write_report_csv(&report, create(&csv_path)?).map_err(|e| io_error(&csv_path, e))?;
    }
    let last: Option<&IterationTrace> = traces.last();
    print_json(&json!({
        "stop_reason": stop_reason,
        "iterations": traces.len(),
        "documents": final_dataset.len(),
        "replaced": traces.iter().map(|t| t.replaced_ids.len()).sum::<usize>(),
        "objective_initial": traces.first().map(|t| t.objective_before),
        "objective_final": last.map(|t| t.objective_refreshed.unwrap_or(t.objective_after)),
        "frequency_gap": report.frequency_gap,
        "term_counts": report.term_counts.iter().map(|t| json!({"term": t.term, "before": t.before.total, "after": t.after.total})).collect::<Vec<_>>(),
    }))
}

fn synth_cmd(args: &SynthArgs) -> Result<(), CliError> {
    let spec = BiasSpec {
        planted_token: args.planted_token.clone(),
        biased_class: ClassId(args.biased_class),
        bias_rate: args.bias_rate,
        background_rate: args.background_rate,
        corpus_size: args.corpus_size,
        seed: args.seed,
        num_classes: args.num_classes,
    };
    let (dataset, rules) = generate_biased_corpus(&spec)?;
    save_dataset(&dataset, &args.out)?;
    rules.save(&args.rules_out).map_err(|e| io_error(&args.rules_out, e))?;
    print_json(&json!({
        "documents": dataset.len(),
        "labels": spec.label_names(),
        "frequency_gap": razor_core::frequency_gap(&dataset, &spec.planted_token),
    }))
}

fn report_cmd(args: &ReportArgs) -> Result<(), CliError> {
    if args.max_n == 0 {
        return Err(CliError::Usage("--max-n must be positive".into()));
    }
    let labels = label_set(&args.labels)?;
    let tokenizer = RunConfig::default().tokenizer;
    let before = load_dataset(&args.before, args.schema.into(), labels.as_ref(), &tokenizer)?;
    let after = load_dataset(&args.after, args.schema.into(), Some(before.label_set()), &tokenizer)?;
    let traces: Vec<IterationTrace> = match &args.traces {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str(&text).map_err(|e| io_error(path, e))?
        }
        None => Vec::new(),
    };
    let terms: Vec<&str> = args.terms.iter().map(String::as_str).filter(|t| !t.is_empty()).collect();
    let options = ReportOptions {
        max_n: args.max_n,
        smoothing: args.smoothing,
        sample: args.sample,
        seed: args.seed,
    };
    let report = emit_report(&before, &after, &traces, &terms, &options)?;
    if let Some(path) = &args.csv {
        write_report_csv(&report, create(path)?).map_err(|e| io_error(path, e))?;
    }
    match &args.out {
        Some(path) => Ok(write_report_json(&report, path)?),
        None => print_json(&report),
    }
}

#[derive(serde::Deserialize)]
struct SubsetLine {
    doc_id: String,
    subset: Vec<usize>,
}

fn check_cmd(args: &CheckArgs) -> Result<(), CliError> {
    let records = load_attributions(&args.attributions)?;
    let queries: Vec<(String, Vec<usize>)> = match &args.subset_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str::<SubsetLine>(l)
                        .map(|s| (s.doc_id, s.subset))
                        .map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
                })
                .collect::<Result<_, _>>()?
        }
        None => records
            .iter()
            .flat_map(|r| r.subsets.iter().map(|s| (r.doc_id.clone(), s.positions.clone())))
            .collect(),
    };
    let by_id: std::collections::HashMap<&str, &AttributionRecord> =
        records.iter().map(|r| (r.doc_id.as_str(), r)).collect();

    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (doc_id, subset) in queries {
        let record = by_id
            .get(doc_id.as_str())
            .ok_or_else(|| CliError::Data(format!("no attribution record for `{doc_id}`")))?;
        let verdict = is_shortcut(&subset, record)?;
        let masses = compare_masses(&subset, record)?;
        let row = json!({
            "doc_id": doc_id,
            "subset": subset,
            "is_shortcut": verdict.is_shortcut,
            "failed": verdict.failed,
            "reason": verdict.failed.map(|f| f.to_string()),
            "lemma1_holds": masses.holds(),
            "subset_mass": masses.subset_mass,
            "complement_mass": masses.complement_mass,
        });
        writeln!(out, "{row}").map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if cli.jobs > 0 {
        rayon_global(cli.jobs);
    }
    match &cli.command {
        Command::Analyze(a) => analyze_cmd(a),
        Command::Rewrite(a) => pipeline_cmd(a, cli.jobs, true),
        Command::Run(a) => pipeline_cmd(a, cli.jobs, false),
        Command::Synth(a) => synth_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::CheckShortcut(a) => check_cmd(a),
    }
}

fn rayon_global(jobs: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        log::warn!("could not size the worker pool to {jobs}: {e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("razor: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
