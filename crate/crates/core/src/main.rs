use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use copyaudit::fixture::write_fixture_registry;
use copyaudit::forge::TemplateSet;
use copyaudit::pipeline::{Pipeline, RunConfig};
use copyaudit::registry::{ingest_annotations, load_registry};
use copyaudit::{AuditError, Result};

#[derive(Parser)]
#[command(name = "copyaudit", version, about = "Audit text-to-image models for reproduction of protected visual features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Registry manifest (overrides the config file)
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Diffusion backend name
    #[arg(long)]
    backend: Option<String>,
    /// Output directory for run artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these topic ids
    #[arg(long, value_delimiter = ',')]
    topics: Option<Vec<String>>,
    /// Chat client ("synthetic" or "openai:<model>")
    #[arg(long)]
    llm: Option<String>,
    /// Topic-level worker threads
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => copyaudit::datamodel::read_json(path)?,
            None => {
                let registry = self.registry.clone().ok_or_else(|| {
                    AuditError::Config("pass --config or --registry".to_string())
                })?;
                RunConfig::for_registry(registry)
            }
        };
        if let Some(r) = &self.registry {
            config.registry_path = r.clone();
        }
        if let Some(b) = &self.backend {
            config.backend_name = b.clone();
        }
        if let Some(o) = &self.out {
            config.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(t) = &self.topics {
            config.topics_filter = Some(t.clone());
        }
        if let Some(l) = &self.llm {
            config.llm_client_name = l.clone();
        }
        if let Some(w) = self.workers {
            config.workers = w;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the shipped 25-topic fixture registry, corpus, and templates
    Fixture {
        /// Directory to populate
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a registry and print its summary
    Inspect {
        #[arg(long)]
        registry: PathBuf,
    },
    /// Merge an annotation sidecar file into a registry
    Ingest {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        topic: String,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Extract topic keywords from cross-attention
    ExtractKeywords(ConfigArgs),
    /// Forge candidate prompts from keywords or synonyms
    ForgePrompts(ConfigArgs),
    /// Keep the K prompts closest to the topic under frozen attention
    Prune(ConfigArgs),
    /// Generate images for the kept prompts
    Generate(ConfigArgs),
    /// Test generated images against the annotated corpus
    TestCopyright(ConfigArgs),
    /// Aggregate artifacts into report files
    Evaluate(ConfigArgs),
    /// Run every stage end to end
    RunAll(ConfigArgs),
}

fn for_each_topic(
    pipeline: &Pipeline,
    mut f: impl FnMut(&Pipeline, &copyaudit::datamodel::Topic) -> Result<()>,
) -> Result<()> {
    for topic in pipeline.selected_topics()? {
        f(pipeline, &topic)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fixture { out } => {
            let manifest = write_fixture_registry(&out)?;
            TemplateSet::write_defaults(&out.join("templates"))?;
            println!("{}", manifest.display());
        }
        Command::Inspect { registry } => {
            let registry = load_registry(&registry)?;
            let summary = registry.summary();
            println!(
                "{}",
                String::from_utf8_lossy(&copyaudit::datamodel::to_canonical_json(&summary)?)
            );
        }
        Command::Ingest {
            registry: path,
            topic,
            annotations,
        } => {
            let mut registry = load_registry(&path)?;
            ingest_annotations(&mut registry, &topic, &annotations)?;
            registry.save(&path)?;
        }
        Command::ExtractKeywords(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            for_each_topic(&pipeline, |p, t| p.stage_keywords(t).map(|_| ()))?;
        }
        Command::ForgePrompts(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            let client = pipeline.chat_client()?;
            for_each_topic(&pipeline, |p, t| {
                p.stage_forge(t, client.as_ref()).map(|_| ())
            })?;
        }
        Command::Prune(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            for_each_topic(&pipeline, |p, t| p.stage_prune(t).map(|_| ()))?;
        }
        Command::Generate(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            for_each_topic(&pipeline, |p, t| p.stage_generate(t).map(|_| ()))?;
        }
        Command::TestCopyright(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            for_each_topic(&pipeline, |p, t| p.stage_test(t).map(|_| ()))?;
        }
        Command::Evaluate(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            pipeline.stage_evaluate()?;
            println!("{}", pipeline.run_dir().join("report.json").display());
        }
        Command::RunAll(args) => {
            let pipeline = Pipeline::new(args.resolve()?)?;
            pipeline.run_all()?;
            println!("{}", pipeline.run_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = match &err {
                AuditError::Schema { .. } => "schema",
                AuditError::Precondition(_) => "precondition",
                AuditError::MissingBinding(_) => "missing_binding",
                AuditError::Gateway { .. } => "gateway",
                AuditError::Capability(_) => "capability",
                AuditError::Config(_) => "config",
                AuditError::ForgeExhausted { .. } => "forge_exhausted",
                AuditError::Lookup { .. } => "lookup",
                AuditError::MissingArtifact { .. } => "missing_artifact",
                AuditError::Report(_) => "report",
                AuditError::Io { .. } => "io",
                AuditError::Json(_) => "json",
                AuditError::Image(_) => "image",
            };
            eprintln!("{}", json!({ "error": err.to_string(), "kind": kind }));
            ExitCode::FAILURE
        }
    }
}
