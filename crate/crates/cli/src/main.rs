//! `qe`: command-line front end for the quality-estimation harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use qe_core::corpus::{histogram, size_warnings, CorpusError, CorpusManifest, LoadMode, ScoreBin, Split};
use qe_core::fertility::{self, FertilityError, TokenizerHandle};
use qe_core::gateway::MockPolicy;
use qe_core::pipeline::table::{render_appendix, render_table, Metric, TableFormat};
use qe_core::pipeline::{self, PipelineError, RunManifest};
use qe_core::prompts::{PromptError, TemplateId, TemplateSet};
use qe_core::sft::{self, SftConfig, SftError, SftFormat, SftMode};
use qe_core::LangPair;

#[derive(Parser)]
#[command(name = "qe", version, about = "Reference-less MT quality estimation with LLM prompts")]
struct Cli {
    /// Seed for exemplar selection, mock outputs, sampling and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus manifest (ingest, fertility, export-sft) or run manifest
    /// (render, run, extract, score, table).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output location: run directory, export directory, or table file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate corpora and print split sizes and score histograms.
    Ingest {
        /// Abort on the first bad row instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Render and store prompts without running inference.
    Render,
    /// Render, infer, extract and score every (pair, template) cell.
    Run {
        /// Mock policy, e.g. `echo-score`, `garbage:0.1`, `fail:5,7@503`.
        #[arg(long)]
        mock: Option<MockPolicy>,
        /// Reuse stored successful outputs.
        #[arg(long)]
        resume: bool,
    },
    /// Re-extract scores from stored outputs.
    Extract {
        /// Model label for the exclusion ledgers.
        #[arg(long)]
        model: Option<String>,
    },
    /// Recompute correlation reports from stored extraction results.
    Score {
        /// Also write the K largest |pred - gold| rows per cell for labelling.
        #[arg(long, value_name = "K")]
        dump_worst: Option<usize>,
    },
    /// Render stored reports as a result table.
    Table {
        #[arg(long, default_value = "rho")]
        metric: Metric,
        #[arg(long, default_value = "text")]
        format: TableFormat,
        /// r, rho, tau and E columns for every model.
        #[arg(long)]
        appendix: bool,
        /// reports.json to read instead of the manifest's run directory.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Token-per-word fertility of test sentences under several tokenizers.
    Fertility {
        /// JSONL list of {name, path, kind?} tokenizer definitions.
        #[arg(long)]
        tokenizers: PathBuf,
        /// Sentences sampled per pair.
        #[arg(long, default_value_t = fertility::DEFAULT_SAMPLE_SIZE)]
        sample: usize,
    },
    /// Write instruction-tuning datasets from the training splits.
    ExportSft {
        #[arg(long, value_enum, default_value = "umt")]
        mode: ModeArg,
        /// Restrict ILT export to one pair.
        #[arg(long)]
        pair: Option<LangPair>,
        #[arg(long, value_enum, default_value = "neutral")]
        format: FormatArg,
        /// Template directory; built-in templates otherwise.
        #[arg(long)]
        template_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Umt,
    Ilt,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Neutral,
    Alpaca,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Fertility(#[from] FertilityError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Short error class printed in front of the message.
    fn kind(&self) -> &'static str {
        match self {
            CliError::Pipeline(e) => match e {
                PipelineError::Manifest { .. } => "ManifestError",
                PipelineError::TemplateMissing(_) => "TemplateMissing",
                PipelineError::EndpointMissing => "EndpointMissing",
                PipelineError::UnknownPair(_) => "UnknownPair",
                PipelineError::InvalidConfig(_) => "InvalidConfig",
                PipelineError::RunDirectory { .. } => "RunDirectory",
                PipelineError::Corpus(e) => corpus_kind(e),
                PipelineError::Prompt(_) => "PromptError",
                PipelineError::Fertility(_) => "TokenizerError",
                PipelineError::Metrics(_) => "MetricsError",
                PipelineError::Io(_) => "IoError",
            },
            CliError::Corpus(e) => corpus_kind(e),
            CliError::Fertility(FertilityError::SampleTooLarge { .. }) => "SampleTooLarge",
            CliError::Fertility(_) => "TokenizerError",
            CliError::Sft(SftError::EmptyTrainSplit(_)) => "EmptyTrainSplit",
            CliError::Sft(_) => "SftError",
            CliError::Prompt(PromptError::TemplateMissing(_)) => "TemplateMissing",
            CliError::Prompt(_) => "PromptError",
            CliError::Io(_) => "IoError",
        }
    }
}

fn corpus_kind(e: &CorpusError) -> &'static str {
    match e {
        CorpusError::FileUnreadable { .. } => "FileUnreadable",
        CorpusError::MissingColumn { .. } => "MissingColumn",
        CorpusError::RowParseError { .. } => "RowParseError",
        _ => "CorpusError",
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> &'a Path {
    match path {
        Some(p) => p,
        None => usage_error(&format!("--manifest <{what}> is required for this command")),
    }
}

fn load_run_manifest(cli: &Cli) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::load(require(&cli.manifest, "RUN_MANIFEST"))?;
    if let Some(seed) = cli.seed {
        m.seed = seed;
    }
    if let Some(out) = &cli.out {
        m.out_dir = std::env::current_dir()?.join(out);
    }
    Ok(m)
}

/// Run directory named by `--out`, else by the run manifest.
fn run_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    match (&cli.out, &cli.manifest) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(_)) => Ok(load_run_manifest(cli)?.out_path()),
        (None, None) => usage_error("either --out <RUN_DIR> or --manifest <RUN_MANIFEST> is required"),
    }
}

fn ingest(cli: &Cli, strict: bool) -> Result<(), CliError> {
    let manifest = CorpusManifest::load(require(&cli.manifest, "CORPUS_MANIFEST"))?;
    let mode = if strict { LoadMode::Strict } else { LoadMode::Lenient };
    let mut summary = Vec::new();
    for entry in &manifest.entries {
        let (corpus, diags) = manifest.load_entry(entry, mode)?;
        println!("{}  train {}  test {}", corpus.pair, corpus.train.len(), corpus.test.len());
        let mut hists = BTreeMap::new();
        for split in [Split::Train, Split::Test] {
            let h = histogram(corpus.split(split));
            let cells: Vec<String> = ScoreBin::ALL.iter().map(|b| format!("{}: {}", b.label(), h[b])).collect();
            println!("  {split:?} bins  {}", cells.join("  "));
            hists.insert(
                format!("{split:?}").to_lowercase(),
                ScoreBin::ALL.iter().map(|b| (b.label(), h[b])).collect::<BTreeMap<_, _>>(),
            );
        }
        for (split, d) in &diags {
            println!("  skipped {split:?} row {}: {:?}", d.row, d.reason);
        }
        for w in size_warnings(&corpus) {
            println!("  note: {w}");
        }
        summary.push(serde_json::json!({
            "pair": corpus.pair,
            "train": corpus.train.len(),
            "test": corpus.test.len(),
            "histograms": hists,
            "skipped_rows": diags.len(),
        }));
    }
    if let Some(out) = &cli.out {
        qe_core::io::write_json_pretty(out, &summary)?;
    }
    Ok(())
}

fn run(cli: &Cli, mock: Option<MockPolicy>, resume: bool) -> Result<(), CliError> {
    let mut m = load_run_manifest(cli)?;
    if mock.is_some() {
        m.mock = mock;
    }
    m.resume |= resume;
    let summary = pipeline::run(&m)?;
    for c in &summary.cells {
        let status = c.error.as_deref().unwrap_or("ok");
        println!(
            "{}  {}  prompts {}  dispatched {}  reused {}  excluded {}  {status}",
            c.pair,
            c.template.label(),
            c.prompts,
            c.dispatched,
            c.reused,
            c.excluded
        );
    }
    print!("{}", render_appendix(&summary.reports, TableFormat::Text));
    println!("run directory: {}", summary.out_dir.display());
    Ok(())
}

fn extract(cli: &Cli, model: Option<String>) -> Result<(), CliError> {
    let dir = run_dir(cli)?;
    let model = match model {
        Some(m) => m,
        None => {
            let copy: serde_json::Value = qe_core::io::read_json(&dir.join(pipeline::MANIFEST_COPY))?;
            copy["inference"]["model_name"].as_str().unwrap_or("mock").to_owned()
        }
    };
    for l in pipeline::reextract(&dir, &model)? {
        println!(
            "{}  {}  total {}  excluded {}{}",
            l.pair,
            l.template.label(),
            l.total,
            l.excluded_count,
            if l.flagged_untrustworthy { " (*)" } else { "" }
        );
    }
    Ok(())
}

fn score(cli: &Cli, dump_worst: Option<usize>) -> Result<(), CliError> {
    let m = load_run_manifest(cli)?;
    let reports = pipeline::rescore(&m, &m.out_path(), dump_worst)?;
    print!("{}", render_appendix(&reports, TableFormat::Text));
    Ok(())
}

fn table(cli: &Cli, metric: Metric, format: TableFormat, appendix: bool, reports: Option<PathBuf>) -> Result<(), CliError> {
    let source = match reports {
        Some(p) => p,
        // `--out` names the table file here, not the run directory.
        None => RunManifest::load(require(&cli.manifest, "RUN_MANIFEST"))?.out_path(),
    };
    let reports = pipeline::load_reports(&source)?;
    let text = if appendix {
        render_appendix(&reports, format)
    } else {
        render_table(&reports, metric, format)
    };
    match &cli.out {
        Some(out) => qe_core::io::write_atomic(out, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn fertility_cmd(cli: &Cli, tokenizers: &Path, sample: usize) -> Result<(), CliError> {
    let manifest = CorpusManifest::load(require(&cli.manifest, "CORPUS_MANIFEST"))?;
    let handles = fertility::load_manifest(tokenizers)?
        .iter()
        .map(TokenizerHandle::from_spec)
        .collect::<Result<Vec<_>, _>>()?;
    let seed = cli.seed.unwrap_or(0);
    let mut segments = Vec::new();
    for entry in &manifest.entries {
        let (corpus, _) = manifest.load_entry(entry, LoadMode::Lenient)?;
        segments.extend(fertility::sample_sentences(&corpus, sample, seed)?);
    }
    let measured = fertility::measure(&segments, &handles);
    for f in &measured.failures {
        eprintln!("warning: tokenizer {} failed on segment {}: {}", f.tokenizer, f.segment_id, f.message);
    }
    let summaries = fertility::summarize(&measured.records)?;
    let mut table = Vec::new();
    fertility::write_summary_tsv(&summaries, &mut table)?;
    print!("{}", String::from_utf8_lossy(&table));
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out)?;
        qe_core::io::write_atomic(&out.join("fertility_summary.tsv"), &table)?;
        qe_core::io::write_jsonl(&out.join("fertility_records.jsonl"), &measured.records)?;
        qe_core::io::write_jsonl(&out.join("fertility_failures.jsonl"), &measured.failures)?;
        let mut plot = Vec::new();
        fertility::write_plot_data(&measured.records, &mut plot)?;
        qe_core::io::write_atomic(&out.join("fertility_plot.tsv"), &plot)?;
    }
    Ok(())
}

fn export_sft(
    cli: &Cli,
    mode: ModeArg,
    pair: Option<LangPair>,
    format: FormatArg,
    template_dir: Option<&Path>,
) -> Result<(), CliError> {
    let manifest = CorpusManifest::load(require(&cli.manifest, "CORPUS_MANIFEST"))?;
    let Some(out) = &cli.out else {
        usage_error("--out <DIR> is required for export-sft")
    };
    let corpora = manifest.load_all(LoadMode::Lenient)?;
    let templates = match template_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let mode = match mode {
        ModeArg::Umt => SftMode::Umt,
        ModeArg::Ilt => SftMode::Ilt(pair),
    };
    let mut config = SftConfig::new(mode, cli.seed.unwrap_or(0));
    config.format = match format {
        FormatArg::Neutral => SftFormat::Neutral,
        FormatArg::Alpaca => SftFormat::Alpaca,
    };
    for entry in sft::export(&corpora, templates.get(TemplateId::Ag)?, &config, out)? {
        println!("{}  {} records", entry.file, entry.records);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Ingest { strict } => ingest(&cli, *strict),
        Command::Render => load_run_manifest(&cli).and_then(|m| {
            for (key, n) in pipeline::render_only(&m)? {
                println!("{key}  {n} prompts");
            }
            Ok(())
        }),
        Command::Run { mock, resume } => run(&cli, mock.clone(), *resume),
        Command::Extract { model } => extract(&cli, model.clone()),
        Command::Score { dump_worst } => score(&cli, *dump_worst),
        Command::Table {
            metric,
            format,
            appendix,
            reports,
        } => table(&cli, *metric, *format, *appendix, reports.clone()),
        Command::Fertility { tokenizers, sample } => fertility_cmd(&cli, tokenizers, *sample),
        Command::ExportSft {
            mode,
            pair,
            format,
            template_dir,
        } => export_sft(&cli, *mode, pair.clone(), *format, template_dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(1)
        }
    }
}
