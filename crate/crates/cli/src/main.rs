//! `cfassay`: batch counterfactual generation, risk reports, dataset export
//! and the annotation server.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cfassay_core::engine::{generate_batch, TrailEngine};
use cfassay_core::mlm::PromptTemplate;
use cfassay_core::models::{shared, shared_filler, AssessedModel, BigramFiller, FillModel, LinearBagModel};
use cfassay_core::risk::{risk_report, RiskReport, RiskScope};
use cfassay_core::store::{parse_dataset, read_jsonl, write_jsonl, Dataset, DatasetFormat, ExportFilter, Store};
use cfassay_core::text::{CounterfactualTrail, GenerationConfig, Method, PredictionScope, Rating};
use cfassay_service::ext::{self, DEFAULT_REMOTE_TIMEOUT};
use cfassay_service::registry::EXT_PREFIX;
use cfassay_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "cfassay", version, about = "Rationale-constrained counterfactuals and rating-based model risk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate one trail per sampled instance and write them as JSONL.
    Generate(GenerateArgs),
    /// Print the risk report for a ratings file.
    Risk(RiskArgs),
    /// Export rated counterfactuals from a data directory as JSONL.
    Export(ExportArgs),
    /// Run the annotation HTTP API.
    Serve(ServeArgs),
    /// Fit a reference linear model on a labeled dataset.
    Fit(FitArgs),
}

#[derive(Debug, Args)]
struct GenerationFlags {
    #[arg(long, default_value_t = 5)]
    max_steps: usize,
    /// Positions considered per step.
    #[arg(long = "top-p", default_value_t = 3)]
    top_p: usize,
    #[arg(long = "beam", default_value_t = 3)]
    beam: usize,
    /// Fill candidates inspected per position.
    #[arg(long, default_value_t = 10)]
    fill_top_k: usize,
    /// Judge the flip on the edited sentence or on the whole document.
    #[arg(long, value_parser = parse_scope, default_value = "sentence")]
    scope: PredictionScope,
}

impl GenerationFlags {
    fn config(&self, method: Method) -> anyhow::Result<GenerationConfig> {
        let config = GenerationConfig {
            method,
            max_steps: self.max_steps,
            top_p_positions: self.top_p,
            beam_width: self.beam,
            fill_top_k: self.fill_top_k,
            scope: self.scope,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_scope(s: &str) -> Result<PredictionScope, String> {
    match s {
        "sentence" => Ok(PredictionScope::Sentence),
        "document" => Ok(PredictionScope::Document),
        other => Err(format!("unknown scope {other:?} (sentence|document)")),
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Weight file of a reference linear model, or `ext:<url>`.
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "hotflip")]
    method: Method,
    #[command(flatten)]
    generation: GenerationFlags,
    /// Maximum number of trails; all instances when omitted.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fill model for mlm: `ext:<url>`. Defaults to a bigram filler over the dataset.
    #[arg(long)]
    filler: Option<String>,
    /// Model id recorded on each trail. Defaults to the --model value.
    #[arg(long)]
    model_id: Option<String>,
    /// JSON file with a prompt template record (`pattern`, `label_names`).
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RiskArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    instance: Option<String>,
    /// Trail file used to resolve --model and --instance. Defaults to
    /// `trails.jsonl` next to the ratings file.
    #[arg(long)]
    trails: Option<PathBuf>,
    #[arg(long)]
    min_plausibility: Option<u8>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long, env = "CFASSAY_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long)]
    min_plausibility: Option<u8>,
    #[arg(long)]
    min_meaningfulness: Option<u8>,
    #[arg(long)]
    flipped_only: bool,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "CFASSAY_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "CFASSAY_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[command(flatten)]
    generation: GenerationFlags,
    /// Per-request generation timeout in seconds.
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Risk(a) => cmd_risk(a),
        Command::Export(a) => cmd_export(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Fit(a) => cmd_fit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = parse_dataset(&bytes, DatasetFormat::from_path(path)).with_context(|| format!("parsing {}", path.display()))?;
    let id = format!("file:{}", &parsed.content_hash[..16]);
    Ok(parsed.into_dataset(id))
}

fn load_model(spec: &str) -> anyhow::Result<Arc<dyn AssessedModel>> {
    if let Some(url) = spec.strip_prefix(EXT_PREFIX) {
        let (model, _) = ext::connect(url, DEFAULT_REMOTE_TIMEOUT)?;
        let model = model.with_context(|| format!("{url} serves no classifier"))?;
        return Ok(shared(Arc::new(model)));
    }
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading model {spec}"))?;
    let model: LinearBagModel = serde_json::from_str(&text).with_context(|| format!("parsing model {spec}"))?;
    Ok(Arc::new(model))
}

fn load_template(path: Option<&Path>) -> anyhow::Result<PromptTemplate> {
    match path {
        None => Ok(PromptTemplate::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let config = args.generation.config(args.method)?;
    let dataset = load_dataset(&args.dataset)?;
    let model = load_model(&args.model)?;
    let template = load_template(args.template.as_deref())?;
    let filler: Option<Arc<dyn FillModel>> = match (args.method, &args.filler) {
        (Method::Hotflip, _) => None,
        (Method::Mlm, Some(spec)) => {
            let url = spec
                .strip_prefix(EXT_PREFIX)
                .with_context(|| format!("--filler must be {EXT_PREFIX}<url>, got {spec:?}"))?;
            let (_, filler) = ext::connect(url, DEFAULT_REMOTE_TIMEOUT)?;
            Some(shared_filler(Arc::new(filler.with_context(|| format!("{url} serves no fill model"))?)))
        }
        (Method::Mlm, None) => Some(Arc::new(BigramFiller::from_corpus(dataset.corpus())?)),
    };

    let instances = dataset
        .instances
        .iter()
        .map(|i| match dataset.rationalized(i, model.as_ref()) {
            Ok((instance, _)) => instance,
            Err(e) => {
                log::warn!("instance {}: no saliency rationale: {e}", i.id);
                i.clone()
            }
        })
        .collect::<Vec<_>>();
    let engine = TrailEngine::new(model.as_ref(), filler.as_deref(), &template);
    let model_id = args.model_id.unwrap_or_else(|| args.model.clone());
    let limit = args.limit.unwrap_or(instances.len());
    let result = generate_batch(&engine, &instances, &config, &model_id, limit, args.seed);
    for (id, message) in &result.errors {
        log::warn!("instance {id}: {message}");
    }
    write_jsonl(&args.out, &result.trails).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{}", result.summary());
    Ok(())
}

fn print_report(report: &RiskReport, json: bool) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if json {
        serde_json::to_writer_pretty(&mut out, report)?;
        writeln!(out)?;
        return Ok(());
    }
    if report.is_empty() {
        writeln!(out, "no ratings")?;
        return Ok(());
    }
    for a in &report.per_annotator {
        writeln!(out, "annotator={} risk={:.4} count={}", a.annotator_id, a.risk, a.count)?;
    }
    let aggregate = report.aggregate.expect("non-empty report has an aggregate");
    writeln!(out, "aggregate={aggregate:.4} total_count={}", report.total_count)?;
    Ok(())
}

fn cmd_risk(args: RiskArgs) -> anyhow::Result<()> {
    let ratings: Vec<Rating> = read_jsonl(&args.ratings).with_context(|| format!("reading {}", args.ratings.display()))?;
    for r in &ratings {
        r.validate().with_context(|| format!("rating {}", r.rating_id))?;
    }
    let scoped = args.model.is_some() || args.instance.is_some();
    let trails_path = args
        .trails
        .clone()
        .unwrap_or_else(|| args.ratings.with_file_name(cfassay_core::store::TRAILS_FILE));
    let trails: Vec<CounterfactualTrail> = if trails_path.exists() {
        read_jsonl(&trails_path).with_context(|| format!("reading {}", trails_path.display()))?
    } else if scoped {
        bail!("--model/--instance need the trail file {}", trails_path.display());
    } else {
        Vec::new()
    };
    let trails = trails.into_iter().map(|t| (t.trail_id.clone(), t)).collect();
    let scope = RiskScope {
        model_id: args.model,
        instance_id: args.instance,
        min_plausibility: args.min_plausibility,
    };
    let report = risk_report(&trails, &ratings, &scope)?;
    print_report(&report, args.json)
}

fn cmd_export(args: ExportArgs) -> anyhow::Result<()> {
    if !args.data_dir.is_dir() {
        bail!("data directory {} does not exist", args.data_dir.display());
    }
    let store = Store::open(&args.data_dir)?;
    let filter = ExportFilter {
        min_plausibility: args.min_plausibility,
        min_meaningfulness: args.min_meaningfulness,
        flipped_only: args.flipped_only,
    };
    let records = store.export_counterfactuals(&filter)?;
    match &args.out {
        Some(path) => write_jsonl(path, &records).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut out = BufWriter::new(std::io::stdout().lock());
            for r in &records {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
            out.flush()?;
        }
    }
    eprintln!("exported {} records", records.len());
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> anyhow::Result<()> {
    let config = ServiceConfig {
        data_dir: Some(args.data_dir),
        generation: args.generation.config(Method::Hotflip)?,
        template: load_template(args.template.as_deref())?,
        generation_timeout: Duration::from_secs(args.timeout_secs),
        ..ServiceConfig::default()
    };
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(cfassay_service::serve(config, addr))?;
    Ok(())
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let docs = dataset
        .instances
        .iter()
        .filter_map(|i| i.gold_label.as_ref().map(|l| (i, l)))
        .map(|(i, l)| {
            let y = dataset.labels.iter().position(|x| x == l).expect("label collected from the dataset");
            (i.document.clone(), y)
        })
        .collect::<Vec<_>>();
    if dataset.labels.len() < 2 {
        bail!("need at least two labels, found {:?}", dataset.labels);
    }
    let (model, accuracy) = LinearBagModel::fit(dataset.labels.clone(), &docs, args.dim, args.seed, args.epochs)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &model)?;
    w.flush()?;
    eprintln!("trained on {} documents, training accuracy {accuracy:.4}", docs.len());
    Ok(())
}
