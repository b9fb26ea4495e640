//! `pathgrad`: corpus generation, training, attribution, evaluation, step
//! sweeps and highlight reports from the command line.
//!
//! Exit status 0 on success, 2 for usage or input errors, 3 for numeric
//! failures. Documents go to stdout (or `--out`); diagnostics go to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pathgrad::corpus::{DEFAULT_CORPUS_SIZE, DEFAULT_VOCAB_SIZE};
use pathgrad::evaluation::DEFAULT_FRACTION;
use pathgrad::path::DEFAULT_BATCH;
use pathgrad::{
    attribute_corpus, corpus_accuracy, default_sweep, evaluate_corpus, generate_synthetic_corpus,
    render_highlight_report, run_sweep, sweep_for_steps, train_toy_classifier, Architecture, AttributionDocument,
    BaselineSpec, Corpus, Method, MethodConfig, MetricsDocument, QuadratureRule, Sentence, ToyModel, TrainConfig,
};

const SEED_ENV: &str = "PATHGRAD_SEED";

#[derive(Parser)]
#[command(name = "pathgrad", version, about = "Path-integral attributions for toy text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic sentiment corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a toy classifier on a corpus and write the model document.
    Train(TrainArgs),
    /// Attribute every sentence of a corpus (or one --sentence).
    Attribute(AttributeArgs),
    /// Log-odds, comprehensiveness and sufficiency per (method, baseline).
    Evaluate(EvaluateArgs),
    /// IG and SIG metrics, delta and gradient-call cost across step counts.
    SweepSteps(SweepArgs),
    /// Render an attribution document with the top tokens highlighted.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Table,
    Html,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Mask,
    Pad,
    Zero,
}

impl Baseline {
    fn spec(self) -> BaselineSpec {
        match self {
            Baseline::Mask => BaselineSpec::MaskToken,
            Baseline::Pad => BaselineSpec::PadToken,
            Baseline::Zero => BaselineSpec::Zero,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Left,
    Right,
    Midpoint,
    Trapezoid,
}

impl From<Rule> for QuadratureRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Left => QuadratureRule::Left,
            Rule::Right => QuadratureRule::Right,
            Rule::Midpoint => QuadratureRule::Midpoint,
            Rule::Trapezoid => QuadratureRule::Trapezoid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    LinearPool,
    MlpPool,
    BilinearAttn,
}

impl From<Arch> for Architecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::LinearPool => Architecture::LinearPool,
            Arch::MlpPool => Architecture::MlpPool,
            Arch::BilinearAttn => Architecture::BilinearAttn,
        }
    }
}

#[derive(Args)]
struct Output {
    /// Write the document here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
}

#[derive(Args)]
struct SeedArg {
    /// Seed for every random choice. PATHGRAD_SEED takes precedence when set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SeedArg {
    fn resolve(&self) -> anyhow::Result<u64> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(std::env::VarError::NotPresent) => Ok(self.seed),
            Err(e) => Err(usage(format!("{SEED_ENV}: {e}"))),
        }
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = DEFAULT_CORPUS_SIZE, value_parser = parse_positive)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "mlp-pool")]
    arch: Arch,
    /// Embedding width.
    #[arg(long, default_value_t = TrainConfig::default().n)]
    width: usize,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// Interpolation steps; defaults to 50 (30 for dig-greedy-simplified).
    #[arg(long, value_parser = parse_positive)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value = "trapezoid")]
    rule: Rule,
    #[arg(long, default_value_t = DEFAULT_FRACTION, value_parser = parse_fraction)]
    fraction: f64,
    #[command(flatten)]
    seed: SeedArg,
    /// Gradient evaluations per parallel batch.
    #[arg(long, default_value_t = DEFAULT_BATCH, value_parser = parse_positive)]
    batch: usize,
}

impl RunArgs {
    fn config(&self, method: Method, baseline: Baseline, seed: u64) -> MethodConfig {
        let mut c = MethodConfig::new(method)
            .with_baseline(baseline.spec())
            .with_rule(self.rule.into())
            .with_seed(seed)
            .with_batch(self.batch);
        if let Some(k) = self.steps {
            c = c.with_steps(k);
        }
        c
    }
}

#[derive(Args)]
struct AttributeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, required_unless_present = "sentence", conflicts_with = "sentence")]
    corpus: Option<PathBuf>,
    /// A single whitespace-separated sentence instead of a corpus.
    #[arg(long)]
    sentence: Option<String>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "sig", value_parser = parse_method)]
    method: Vec<Method>,
    #[arg(long, value_enum, default_value = "mask")]
    baseline: Baseline,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated methods; one table row per (method, baseline).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "grad-input,ig,gradient-shap,dig-greedy-simplified,sig",
        value_parser = parse_method
    )]
    method: Vec<Method>,
    /// Comma-separated baselines.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "mask")]
    baseline: Vec<Baseline>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated step counts. Without it: IG at 50, 250 and 10 per
    /// word, SIG at 10 and 50.
    #[arg(long, value_delimiter = ',', value_parser = parse_positive)]
    steps: Vec<usize>,
    #[arg(long, value_enum, default_value = "mask")]
    baseline: Baseline,
    #[arg(long, value_enum, default_value = "trapezoid")]
    rule: Rule,
    #[arg(long, default_value_t = DEFAULT_FRACTION, value_parser = parse_fraction)]
    fraction: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = DEFAULT_BATCH, value_parser = parse_positive)]
    batch: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ReportArgs {
    /// Attribution document written by `pathgrad attribute`.
    input: PathBuf,
    #[command(flatten)]
    output: Output,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: pathgrad::Error| e.to_string())
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("fraction must lie in (0, 1], got {f}"))
    }
}

/// Error classes that map to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn numeric(msg: impl Into<String>) -> anyhow::Error {
    Failure::Numeric(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Numeric(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<pathgrad::Error>() {
            return match e {
                pathgrad::Error::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Corpus::from_jsonl(&read(path)?).with_context(|| format!("corpus {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<ToyModel> {
    ToyModel::from_json(&read(path)?).with_context(|| format!("model {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn gen_corpus(args: &GenCorpusArgs) -> anyhow::Result<()> {
    let corpus = generate_synthetic_corpus(args.size, args.vocab_size, args.seed.resolve()?);
    emit(args.out.as_deref(), &corpus.to_jsonl()?)
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let config = TrainConfig {
        architecture: args.arch.into(),
        n: args.width,
        hidden: args.hidden,
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed.resolve()?,
        ..TrainConfig::default()
    };
    let (model, report) = train_toy_classifier(&corpus, &config)?;
    eprintln!("final loss {:.6}", report.final_loss);
    eprintln!("accuracy {:.4}", corpus_accuracy(&model, &corpus)?);
    emit(args.out.as_deref(), &model.to_json()?)
}

fn attribute(args: &AttributeArgs) -> anyhow::Result<()> {
    let model = load_model(&args.run.model)?;
    let corpus = match (&args.corpus, &args.sentence) {
        (Some(path), _) => load_corpus(path)?,
        (None, Some(text)) => {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                return Err(usage("--sentence is empty"));
            }
            Corpus::new(model.vocabulary().clone(), vec![Sentence { id: 0, tokens, label: 0 }])?
        }
        (None, None) => return Err(usage("either --corpus or --sentence is required")),
    };
    let seed = args.run.seed.resolve()?;
    let configs: Vec<MethodConfig> = args.method.iter().map(|&m| args.run.config(m, args.baseline, seed)).collect();
    let records = attribute_corpus(&model, &corpus, &configs, args.run.fraction)?;
    let doc = AttributionDocument::new(seed, args.run.fraction, records);
    let text = match args.output.format {
        Format::Jsonl => doc.to_jsonl()?,
        Format::Table => render_highlight_report(&doc)?.to_text(),
        Format::Html => render_highlight_report(&doc)?.to_html(),
    };
    emit(args.output.out.as_deref(), &text)
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let model = load_model(&args.run.model)?;
    let corpus = load_corpus(&args.corpus)?;
    let seed = args.run.seed.resolve()?;
    let mut reports = Vec::new();
    for &method in &args.method {
        for &baseline in &args.baseline {
            let config = args.run.config(method, baseline, seed);
            let report = evaluate_corpus(&model, &corpus, &config, args.run.fraction)?;
            if let Some(f) = report.failures.first() {
                return Err(numeric(format!(
                    "{method} with {} baseline: {} of {} sentences failed; first, sentence {}: {}",
                    baseline.spec().kind(),
                    report.failures.len(),
                    corpus.len(),
                    f.id,
                    f.error
                )));
            }
            reports.push(report);
        }
    }
    let doc = MetricsDocument::new(seed, args.run.fraction, reports);
    let text = match args.output.format {
        Format::Jsonl => doc.to_jsonl()?,
        Format::Table => doc.table().to_text(),
        Format::Html => doc.table().to_html(),
    };
    emit(args.output.out.as_deref(), &text)
}

fn sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    let entries = if args.steps.is_empty() {
        default_sweep()
    } else {
        sweep_for_steps(&args.steps)
    };
    let template = MethodConfig::new(Method::IntegratedGradients)
        .with_baseline(args.baseline.spec())
        .with_rule(args.rule.into())
        .with_seed(args.seed.resolve()?)
        .with_batch(args.batch);
    let (doc, times) = run_sweep(&model, &corpus, &entries, &template, args.fraction)?;
    for (row, t) in doc.rows.iter().zip(&times) {
        eprintln!(
            "{}@{}: {} gradient calls in {:.3} s",
            row.method,
            row.steps,
            row.gradient_calls,
            t.as_secs_f64()
        );
    }
    let text = match args.output.format {
        Format::Jsonl => doc.to_jsonl()?,
        Format::Table => doc.table().to_text(),
        Format::Html => doc.table().to_html(),
    };
    emit(args.output.out.as_deref(), &text)
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let doc = AttributionDocument::from_jsonl(&read(&args.input)?)
        .with_context(|| format!("attribution document {}", args.input.display()))?;
    let report = render_highlight_report(&doc)?;
    let text = match args.output.format {
        Format::Jsonl => report.to_json()?,
        Format::Table => report.to_text(),
        Format::Html => report.to_html(),
    };
    emit(args.output.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Attribute(a) => attribute(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepSteps(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pathgrad: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&usage("x")), 2);
        assert_eq!(exit_code(&numeric("x")), 3);
        let wrapped = anyhow!(pathgrad::Error::Numeric("nan".into())).context("model m");
        assert_eq!(exit_code(&wrapped), 3);
        assert_eq!(exit_code(&anyhow!(pathgrad::Error::Format("bad".into()))), 2);
    }

    #[test]
    fn fraction_parser_bounds() {
        assert_eq!(parse_fraction("0.2"), Ok(0.2));
        assert!(parse_fraction("0").is_err());
        assert!(parse_fraction("1.01").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
