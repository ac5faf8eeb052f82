use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ric_core::engine::Targets;
use ric_core::scaling::{sweep, sweep_csv, SweepGrid};
use ric_core::{
    strip_interruptions, system_share, Context, DeterministicMock, InterruptionPolicy,
    Message, TokenCount,
};
use ric_gateway::config::GatewayConfig;
use ric_gateway::wire::WireRecord;
use ric_gateway::{router, Gateway, GatewayError};
use serde_json::json;

const USAGE: u8 = 1;
const INVALID_CONFIG: u8 = 2;
const UPSTREAM_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "ric", version, about = "Periodic interruption injection for LLM contexts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve { config: PathBuf },
    /// Transform a chat request read from stdin and print the result.
    Transform {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Conversation id for turn carry (only meaningful within one run).
        #[arg(long)]
        conversation: Option<String>,
    },
    /// Interleave interruptions into a deterministic mock generation.
    Simulate {
        #[arg(long)]
        tokens: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        interval: u64,
        #[arg(long)]
        max_tokens: Option<u64>,
        #[arg(long)]
        refuse_after: Option<u64>,
        /// Print the transcript as well as the summary.
        #[arg(long)]
        transcript: bool,
    },
    /// Evaluate the ratio model over a parameter grid, as CSV.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Remove sentinel-delimited interruptions from stdin.
    Strip {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Count tokens on stdin.
    Count,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("ric: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(USAGE, e))
}

fn load_config(path: Option<&Path>) -> Result<GatewayConfig, Failure> {
    match path {
        Some(path) => GatewayConfig::load(path).map_err(|e| fail(INVALID_CONFIG, e)),
        None => Ok(GatewayConfig::default()),
    }
}

fn read_stdin() -> Result<Vec<u8>, Failure> {
    let mut input = Vec::new();
    io::stdin()
        .read_to_end(&mut input)
        .map_err(|e| fail(USAGE, format!("reading stdin: {e}")))?;
    Ok(input)
}

fn write_stdout(text: &str) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| fail(USAGE, e))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Serve { config } => {
            let config = load_config(Some(&config))?;
            let listen = config.listen;
            let gateway = Arc::new(Gateway::new(config).map_err(|e| fail(INVALID_CONFIG, e))?);
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(listen)
                    .await
                    .map_err(|e| fail(USAGE, format!("binding {listen}: {e}")))?;
                tracing::info!(%listen, policy = gateway.policy_version(), "serving");
                axum::serve(listener, router(gateway))
                    .await
                    .map_err(|e| fail(USAGE, e))
            })
        }
        Command::Transform {
            config,
            conversation,
        } => {
            let mut config = load_config(config.as_deref())?;
            config.audit_log = None;
            let gateway = Gateway::new(config).map_err(|e| fail(INVALID_CONFIG, e))?;
            let body = read_stdin()?;
            let response = runtime()?
                .block_on(gateway.transform(conversation.as_deref(), &body))
                .map_err(|e: GatewayError| fail(USAGE, e))?;
            let json = serde_json::to_string_pretty(&response).map_err(|e| fail(USAGE, e))?;
            write_stdout(&(json + "\n"))
        }
        Command::Simulate {
            tokens,
            seed,
            interval,
            max_tokens,
            refuse_after,
            transcript,
        } => {
            let policy = InterruptionPolicy::builder()
                .interval(interval)
                .targets(Targets::ALL)
                .build()
                .map_err(|e| fail(INVALID_CONFIG, e))?;
            let mut mock = DeterministicMock::new(seed, tokens);
            if let Some(n) = refuse_after {
                mock = mock.refuse_after(n);
            }
            let context = Context::new(vec![Message::user("Think step by step.")])
                .map_err(|e| fail(USAGE, e))?;
            let budget = TokenCount::new(max_tokens.unwrap_or(u64::MAX));
            let outcome = futures::executor::block_on(ric_core::run_interleaved(
                context, &policy, &mock, budget,
            ));
            let (run, failure) = match outcome {
                Ok(run) => (run, None),
                Err(failed) => (failed.partial, Some(failed.cause)),
            };
            let records: Vec<WireRecord> = run
                .records
                .iter()
                .map(|r| WireRecord::new(r, Some(r.text.clone()), None))
                .collect();
            let ratio = system_share(&run.final_context).ok();
            let mut summary = json!({
                "emitted_tokens": run.emitted_tokens.get(),
                "segments": run.segments.len(),
                "interruptions": records,
                "ratio": ratio.as_ref().map(|r| ric_core::ratio::to_f64(&r.measured_ratio)),
                "error": failure.as_ref().map(|f| f.message.clone()),
            });
            if transcript {
                summary["transcript"] = json!(run.transcript);
            }
            let text = serde_json::to_string_pretty(&summary).map_err(|e| fail(USAGE, e))?;
            write_stdout(&(text + "\n"))?;
            match failure {
                Some(cause) => Err(fail(UPSTREAM_FAILURE, format!("upstream failed: {cause}"))),
                None => Ok(()),
            }
        }
        Command::Sweep { grid } => {
            let source = std::fs::read_to_string(&grid)
                .map_err(|e| fail(USAGE, format!("{}: {e}", grid.display())))?;
            let grid = SweepGrid::parse(&source).map_err(|e| fail(INVALID_CONFIG, e))?;
            let rows = sweep(&grid).map_err(|e| fail(INVALID_CONFIG, e))?;
            write_stdout(&sweep_csv(&rows))
        }
        Command::Strip { config } => {
            let config = load_config(config.as_deref())?;
            let input = read_stdin()?;
            let text = std::str::from_utf8(&input).map_err(|e| fail(USAGE, e))?;
            let stripped = strip_interruptions(text, &config.policy).map_err(|e| fail(USAGE, e))?;
            write_stdout(&stripped)
        }
        Command::Count => {
            let input = read_stdin()?;
            let count = ric_core::tokens::count_tokens_bytes(&input).map_err(|e| fail(USAGE, e))?;
            write_stdout(&format!("{count}\n"))
        }
    }
}
