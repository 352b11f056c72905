use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use blockrag_core::evaluation::Script;
use blockrag_core::ingestion::SourceFormat;
use blockrag_core::report::ExportFormat;
use blockrag_core::{ProcessingState, ReportId};
use blockrag_server::ServerConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blockrag", version, about = "Block-level retrieval with human curation")]
struct Cli {
    /// Service config file (TOML). `BLOCKRAG_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve,
    /// Ingest files into a block store.
    Ingest(IngestArgs),
    /// Report operations.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// Scripted strategy comparisons.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Adapter config (TOML or JSON).
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Block store directory; defaults to the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReportCommand {
    Export {
        report_id: String,
        #[arg(long, default_value = "md")]
        format: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    Run {
        /// Directory of pdf, txt and md sources.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory of JSON scripts.
        #[arg(long)]
        scripts: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "naive,label_naive,symbiotic")]
        strategies: Vec<String>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Writes results.json and table.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut config = ServerConfig::load(cli.config.as_deref())?;
    let explicit_dir = cli.data_dir.is_some();
    if let Some(dir) = cli.data_dir {
        config.data_dir = dir;
    }
    match cli.command {
        Command::Serve => {
            let engine = config.build_engine()?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(blockrag_server::serve(config, engine))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ingest(args) => {
            if let Some(out) = args.out {
                config.data_dir = out;
            }
            if let Some(adapters) = args.adapters {
                config.adapters = Some(adapters);
            }
            let engine = config.build_engine()?;
            let mut failed = false;
            for file in &args.files {
                let job = engine.ingest_path(file).with_context(|| format!("ingesting {}", file.display()))?;
                failed |= job.stage == ProcessingState::Failed;
                println!("{}", serde_json::to_string(&job)?);
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Report { command: ReportCommand::Export { report_id, format, out } } => {
            let engine = config.build_engine()?;
            let format: ExportFormat = format.parse()?;
            let bytes = engine.export_report(&ReportId(report_id), format)?;
            match out {
                Some(path) => std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::Write::write_all(&mut std::io::stdout(), &bytes)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { command: EvalCommand::Run { corpus, scripts, strategies, adapters, out } } => {
            if let Some(adapters) = adapters {
                config.adapters = Some(adapters);
            }
            // in memory unless --data-dir was given
            let mut builder = config.engine_builder()?;
            if !explicit_dir {
                builder = builder.config(blockrag_core::EngineConfig { data_dir: None, k: config.k });
            }
            let engine = builder.build()?;
            for file in corpus_files(&corpus)? {
                let job = engine.ingest_path(&file)?;
                anyhow::ensure!(job.stage == ProcessingState::Indexed, "{}: {:?}", file.display(), job.error_message);
            }
            let scripts = Script::load_dir(&scripts)?;
            let report = engine.run_experiment(&scripts, &strategies)?;
            let table = report.render_table();
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("results.json"), serde_json::to_vec_pretty(&report)?)?;
                std::fs::write(dir.join("table.txt"), &table)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn corpus_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && SourceFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    Ok(files)
}
