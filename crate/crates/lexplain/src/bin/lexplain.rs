//! Command-line front end: attribution runs, faithfulness evaluation, the
//! concept pipeline, and HTML report rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use lexplain::activations::{collect_activations, load_bundle, save_bundle, ActivationBundle};
use lexplain::attr::engine::{explain, Target};
use lexplain::attr::metrics::{aopc, deletion, insertion, AopcVariant, MetricConfig};
use lexplain::concept::models::{fit, load_model, save_model, ConceptKind, ConceptModel};
use lexplain::concept::{
    concept_importance, concept_metrics, llm_label, maxact_words, top_vocab, HttpLabelingClient,
    ImportanceEstimator, LabelingClient, StubLabelingClient,
};
use lexplain::model::{model_by_name, split, ModelAdapter, SplitModel};
use lexplain::report::{
    emit_html, load_report, save_report, ExplanationReport, MetricRecord, ReportRun, RunConfig,
};
use lexplain::text::{tokenize, ActivationGranularity, Tokenizer};
use lexplain::{Error, Result};

#[derive(Parser)]
#[command(name = "lexplain", version, about = "Post-hoc explanations for language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an attribution method and write a report.
    Attribute(AttributeArgs),
    /// Compute faithfulness metrics for a saved report.
    Evaluate(EvaluateArgs),
    /// Concept pipeline: fit, interpret, importance, metrics.
    Concepts {
        #[command(subcommand)]
        command: ConceptsCommand,
    },
    /// Render a saved report JSON as a self-contained HTML page.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model name (tiny-gen, tiny-cls, linear-bow, linear-bow-great).
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttributeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Attribution method name.
    #[arg(long)]
    method: Option<String>,
    /// Input text; repeat for multiple inputs.
    #[arg(long)]
    text: Vec<String>,
    /// Unit granularity: token, word, sentence.
    #[arg(long)]
    granularity: Option<String>,
    /// Score space: logits, softmax, log_softmax.
    #[arg(long)]
    inference_mode: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Explain this class instead of the argmax (classification models).
    #[arg(long)]
    class_index: Option<usize>,
    /// Explain only this generated position (generation models).
    #[arg(long)]
    output_position: Option<usize>,
    /// Report JSON path.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also render the report as HTML here.
    #[arg(long)]
    html: Option<PathBuf>,
    /// Record wall-clock timing in the report (breaks byte-stability).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Report JSON produced by `attribute`.
    #[arg(long)]
    report: PathBuf,
    /// Output path; defaults to rewriting the input report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ConceptsCommand {
    /// Fit a concept model over corpus activations.
    Fit(FitArgs),
    /// Interpret concepts via MaxAct words or vocabulary projection.
    Interpret(InterpretArgs),
    /// Concept importance for one input and target.
    Importance(ImportanceArgs),
    /// Concept-space quality metrics.
    Metrics(MetricsArgs),
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// UTF-8 corpus, one document per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Saved activation cache; used instead of collecting from the corpus.
    #[arg(long)]
    activations: Option<PathBuf>,
    /// Activation granularity: cls_token, all_tokens, non_special_tokens, word_mean.
    #[arg(long)]
    activation_granularity: Option<String>,
    #[arg(long)]
    split_point: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Concept kind: neurons, kmeans, pca, svd, nmf, sae_vanilla, sae_top_k, sae_batch_top_k.
    #[arg(long)]
    kind: Option<String>,
    /// Concept count.
    #[arg(long)]
    c: Option<usize>,
    /// TopK sparsity for SAE kinds.
    #[arg(long)]
    k: Option<usize>,
    /// Concept model output path.
    #[arg(long, default_value = "concepts.cpt")]
    out: PathBuf,
    /// Also cache collected activations here.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct InterpretArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    concept_model: PathBuf,
    /// maxact or top_vocab.
    #[arg(long, default_value = "maxact")]
    method: String,
    /// Evidence items per concept.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Attach natural-language labels using the built-in deterministic stub.
    #[arg(long)]
    label: bool,
    /// Label via an HTTP endpoint, host:port[/path].
    #[arg(long)]
    label_endpoint: Option<String>,
    #[arg(long, default_value = "interpretations.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ImportanceArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    concept_model: PathBuf,
    #[arg(long)]
    split_point: Option<String>,
    #[arg(long)]
    text: String,
    #[arg(long)]
    class_index: Option<usize>,
    #[arg(long)]
    output_position: Option<usize>,
    /// grad or concept_x_grad.
    #[arg(long, default_value = "concept_x_grad")]
    estimator: String,
    #[arg(long)]
    inference_mode: Option<String>,
    #[arg(long, default_value = "importance.json")]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    concept_model: PathBuf,
    /// Second concept model for the stability metric.
    #[arg(long)]
    other: Option<PathBuf>,
    #[arg(long, default_value = "concept_metrics.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "report.html")]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} '{value}'")))
}

fn parse_kind(name: &str) -> Result<ConceptKind> {
    Ok(match name {
        "neurons" => ConceptKind::Neurons,
        "kmeans" | "k_means" => ConceptKind::KMeans,
        "pca" => ConceptKind::Pca,
        "svd" => ConceptKind::Svd,
        "nmf" => ConceptKind::Nmf,
        "sae" | "sae_vanilla" => ConceptKind::SaeVanilla,
        "sae_top_k" | "sae_topk" => ConceptKind::SaeTopK,
        "sae_batch_top_k" | "sae_batch_topk" => ConceptKind::SaeBatchTopK,
        other => return Err(Error::Config(format!("unknown concept kind '{other}'"))),
    })
}

/// Defaults, then config file, then flags, then LEXPLAIN_SEED; the seed is
/// pushed into every sub-config at the end.
fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(model) = &common.model {
        cfg.model = model.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Ok(s) = std::env::var("LEXPLAIN_SEED") {
        cfg.seed = s
            .parse()
            .map_err(|_| Error::Config(format!("LEXPLAIN_SEED is not an integer: '{s}'")))?;
    }
    cfg.propagate_seed();
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    lexplain::activations::atomic_write(path, text.as_bytes())
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let docs: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(docs)
}

struct ConceptContext {
    split: SplitModel,
    tokenizer: Tokenizer,
}

fn concept_context(cfg: &RunConfig, args: &CorpusArgs) -> Result<ConceptContext> {
    let (adapter, tokenizer) = model_by_name(&cfg.model, cfg.seed)?;
    let split_point = args.split_point.as_deref().unwrap_or(&cfg.split_point);
    Ok(ConceptContext {
        split: split(adapter, split_point)?,
        tokenizer,
    })
}

/// Load the activation cache if given, otherwise collect from the corpus.
fn resolve_bundle(ctx: &ConceptContext, args: &CorpusArgs) -> Result<ActivationBundle> {
    if let Some(path) = &args.activations {
        return load_bundle(path);
    }
    let corpus = args
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("need --corpus or --activations".to_string()))?;
    let granularity = match &args.activation_granularity {
        Some(g) => parse_enum("activation granularity", g)?,
        None => ActivationGranularity::WordMean,
    };
    collect_activations(&ctx.split, &ctx.tokenizer, &read_corpus(corpus)?, granularity)
}

fn target_from_flags(
    class_index: Option<usize>,
    output_position: Option<usize>,
) -> Result<Option<Target>> {
    match (class_index, output_position) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--class-index and --output-position are mutually exclusive".to_string(),
        )),
        (Some(c), None) => Ok(Some(Target::class(c))),
        (None, Some(p)) => Ok(Some(Target::generated(p))),
        (None, None) => Ok(None),
    }
}

fn metric_records(
    model: &dyn ModelAdapter,
    tokenizer: &Tokenizer,
    input: &str,
    result: &lexplain::attr::AttributionResult,
    cfg: &MetricConfig,
) -> Result<Vec<MetricRecord>> {
    let tok = tokenize(input, tokenizer)?;
    let has_mask = tokenizer.has_mask_token;
    let del = deletion(model, &tok, result, cfg, has_mask)?;
    let ins = insertion(model, &tok, result, cfg, has_mask)?;
    let curve = |name: &str, c: lexplain::attr::metrics::FaithfulnessCurve| MetricRecord {
        metric: name.to_string(),
        variant: None,
        fractions: Some(c.fractions),
        scores: Some(c.scores),
        auc: Some(c.auc),
        value: None,
    };
    let scalar = |variant: &str, v: f64| MetricRecord {
        metric: "aopc".to_string(),
        variant: Some(variant.to_string()),
        fractions: None,
        scores: None,
        auc: None,
        value: Some(v),
    };
    Ok(vec![
        curve("deletion", del),
        curve("insertion", ins),
        scalar(
            "comprehensiveness",
            aopc(model, &tok, result, cfg, has_mask, AopcVariant::Comprehensiveness)?,
        ),
        scalar(
            "sufficiency",
            aopc(model, &tok, result, cfg, has_mask, AopcVariant::Sufficiency)?,
        ),
    ])
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_attribute(args: &AttributeArgs) -> Result<()> {
    let start = std::time::Instant::now();
    let mut cfg = load_config(&args.common)?;
    if let Some(m) = &args.method {
        cfg.explainer.method = m.clone();
    }
    if let Some(g) = &args.granularity {
        cfg.explainer.granularity = parse_enum("granularity", g)?;
    }
    if let Some(m) = &args.inference_mode {
        cfg.explainer.inference_mode = parse_enum("inference mode", m)?;
    }
    if let Some(n) = args.max_new_tokens {
        cfg.explainer.max_new_tokens = n;
    }
    if args.text.is_empty() {
        return Err(Error::Config("no input text: pass --text at least once".to_string()));
    }
    let (model, tokenizer) = model_by_name(&cfg.model, cfg.seed)?;
    let target = target_from_flags(args.class_index, args.output_position)?;
    let targets: Option<Vec<Target>> =
        target.map(|t| std::iter::repeat(t).take(args.text.len()).collect());
    let mut runs = Vec::new();
    for text in &args.text {
        let per_input = targets.as_ref().map(|t| std::slice::from_ref(&t[0]));
        let results = explain(
            &cfg.explainer,
            model.as_ref(),
            &tokenizer,
            std::slice::from_ref(text),
            per_input,
        )?;
        runs.push(ReportRun {
            model: cfg.model.clone(),
            config: cfg.explainer.clone(),
            input: text.clone(),
            results,
            metrics: Vec::new(),
        });
    }
    let mut report = ExplanationReport::new(runs);
    if args.timing {
        report.timing_ms = Some(start.elapsed().as_millis() as u64);
    }
    save_report(&report, &args.out)?;
    if let Some(html) = &args.html {
        emit_html(&report, html)?;
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let mut report = load_report(&args.report)?;
    for run in &mut report.runs {
        let (model, tokenizer) = model_by_name(&run.model, cfg.seed)?;
        let mut metric_cfg = cfg.metric.clone();
        metric_cfg.perturb.replacement = run.config.perturb.replacement;
        run.metrics = run
            .results
            .iter()
            .map(|r| metric_records(model.as_ref(), &tokenizer, &run.input, r, &metric_cfg))
            .collect::<Result<_>>()?;
    }
    save_report(&report, args.out.as_deref().unwrap_or(&args.report))?;
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(k) = &args.kind {
        cfg.concept_kind = k.clone();
    }
    if let Some(c) = args.c {
        cfg.concept.c = c;
    }
    if let Some(k) = args.k {
        cfg.concept.sae.k = k;
    }
    let kind = parse_kind(&cfg.concept_kind)?;
    let ctx = concept_context(&cfg, &args.corpus)?;
    let bundle = resolve_bundle(&ctx, &args.corpus)?;
    let model = fit(kind, &bundle, &cfg.concept)?;
    save_model(&model, &args.out)?;
    if let Some(cache) = &args.cache {
        save_bundle(&bundle, cache)?;
    }
    Ok(())
}

fn cmd_interpret(args: &InterpretArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ctx = concept_context(&cfg, &args.corpus)?;
    let model = load_model(&args.concept_model)?;
    let mut interps = match args.method.as_str() {
        "maxact" => {
            let bundle = resolve_bundle(&ctx, &args.corpus)?;
            let corpus_path = args
                .corpus
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("maxact needs --corpus".to_string()))?;
            let corpus: Vec<_> = read_corpus(corpus_path)?
                .iter()
                .map(|t| tokenize(t, &ctx.tokenizer))
                .collect::<Result<_>>()?;
            maxact_words(&model, &bundle, &corpus, args.top_k)?
        }
        "top_vocab" => (0..model.c())
            .map(|j| top_vocab(&ctx.split, &model, j, args.top_k))
            .collect::<Result<_>>()?,
        other => return Err(Error::Config(format!("unknown interpret method '{other}'"))),
    };
    if args.label || args.label_endpoint.is_some() {
        let client: Box<dyn LabelingClient> = match &args.label_endpoint {
            Some(endpoint) => {
                let (address, path) = match endpoint.split_once('/') {
                    Some((a, p)) => (a.to_string(), format!("/{p}")),
                    None => (endpoint.clone(), "/label".to_string()),
                };
                Box::new(HttpLabelingClient {
                    address,
                    path,
                    timeout: Duration::from_secs(10),
                })
            }
            None => Box::new(StubLabelingClient),
        };
        interps = interps
            .iter()
            .map(|i| llm_label(i, client.as_ref()))
            .collect::<Result<_>>()?;
    }
    write_json(&interps, &args.out)
}

fn cmd_importance(args: &ImportanceArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(sp) = &args.split_point {
        cfg.split_point = sp.clone();
    }
    if let Some(m) = &args.inference_mode {
        cfg.explainer.inference_mode = parse_enum("inference mode", m)?;
    }
    let (adapter, tokenizer) = model_by_name(&cfg.model, cfg.seed)?;
    let split_model = split(adapter, &cfg.split_point)?;
    let model = load_model(&args.concept_model)?;
    let estimator = match args.estimator.as_str() {
        "grad" => ImportanceEstimator::Grad,
        "concept_x_grad" => ImportanceEstimator::ConceptXGrad,
        other => return Err(Error::Config(format!("unknown estimator '{other}'"))),
    };
    let tok = tokenize(&args.text, &tokenizer)?;
    // Generation targets are teacher-forced: the prompt is extended with the
    // greedy prefix and the target becomes an absolute activation row.
    let (ids, target) = match target_from_flags(args.class_index, args.output_position)? {
        Some(t) if t.class_index.is_some() => (tok.token_ids.clone(), t),
        maybe_gen => {
            if split_model.adapter.task() == lexplain::model::Task::Classification {
                return Err(Error::Config(
                    "classification models need --class-index".to_string(),
                ));
            }
            let p = maybe_gen.and_then(|t| t.output_position).unwrap_or(0);
            let generated =
                lexplain::attr::engine::greedy_decode(split_model.adapter.as_ref(), &tok.token_ids, p + 1);
            if generated.len() <= p {
                return Err(Error::InvalidTarget(format!(
                    "position {p} beyond {} generated tokens",
                    generated.len()
                )));
            }
            let mut ids = tok.token_ids.clone();
            ids.extend_from_slice(&generated[..p]);
            let mut target = Target::generated(ids.len() - 1);
            target.token_id = Some(generated[p]);
            target.token_display = Some(lexplain::attr::engine::display_token(generated[p]));
            (ids, target)
        }
    };
    let importance = concept_importance(
        &split_model,
        &model,
        &ids,
        &target,
        cfg.explainer.inference_mode,
        estimator,
    )?;
    write_json(&importance, &args.out)
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ctx = concept_context(&cfg, &args.corpus)?;
    let model = load_model(&args.concept_model)?;
    let other: Option<ConceptModel> = match &args.other {
        Some(path) => Some(load_model(path)?),
        None => None,
    };
    let bundle = resolve_bundle(&ctx, &args.corpus)?;
    let metrics = concept_metrics(&model, &bundle, other.as_ref())?;
    write_json(&metrics, &args.out)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let report = load_report(&args.report)?;
    emit_html(&report, &args.out)
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Exit 2 for configuration mistakes, 3 for runtime failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::UnknownMethod(_)
        | Error::UnknownSplitPoint { .. }
        | Error::InvalidTarget(_) => 2,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Attribute(args) => cmd_attribute(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Concepts { command } => match command {
            ConceptsCommand::Fit(args) => cmd_fit(args),
            ConceptsCommand::Interpret(args) => cmd_interpret(args),
            ConceptsCommand::Importance(args) => cmd_importance(args),
            ConceptsCommand::Metrics(args) => cmd_metrics(args),
        },
        Command::Report(args) => cmd_report(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
