use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use parley_core::ExportFormat;
use parley_gateway::{CreateSessionRequest, GatewayConfig};
use parley_simkit::offline::{export_log, load_log, resolve_log, verify_records};
use parley_simkit::{simulate, AdminClient, Scenario, SimError};

/// Operator tool for the parley chat research platform.
#[derive(Parser)]
#[command(name = "parley", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway until interrupted.
    Serve {
        /// Gateway config file (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Listen address, e.g. 127.0.0.1:8080.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Create a session and print the participants' join tokens as JSON.
    CreateSession {
        /// Gateway base URL.
        #[arg(long)]
        server: String,
        #[arg(long, env = "CBK_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: String,
        /// `{config, roster}` as JSON or TOML, or a scenario file.
        file: PathBuf,
    },
    /// Export a session log as CSV or XLSX.
    Export {
        /// Log file, or a session id under --data-dir.
        log: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: ExportFormat,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario against a server and print every transcript as JSON.
    Simulate {
        #[arg(long)]
        server: String,
        #[arg(long, env = "CBK_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: String,
        /// Jitter seed, overriding the scenario's.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        scenario: PathBuf,
    },
    /// Replay a log, re-run its operations and recompute all telemetry.
    Verify {
        log: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {e}", category.as_str());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}

async fn run(command: Command) -> Result<(), SimError> {
    match command {
        Command::Serve {
            config,
            data_dir,
            bind,
        } => serve(config, data_dir, bind).await,
        Command::CreateSession {
            server,
            admin_token,
            file,
        } => {
            let request = read_create_request(&file)?;
            let created = AdminClient::new(&server, admin_token)
                .create_session(&request)
                .await?;
            write_out(None, &to_json(&created))
        }
        Command::Export {
            log,
            data_dir,
            format,
            out,
        } => {
            let path = resolve_log(&log, data_dir.as_deref());
            let records = load_log(&path)?;
            write_out(out.as_deref(), &export_log(&records, format)?)
        }
        Command::Simulate {
            server,
            admin_token,
            seed,
            out,
            scenario,
        } => {
            let scenario = Scenario::from_file(&scenario)?;
            let admin = AdminClient::new(&server, admin_token);
            let report = simulate(&admin, &scenario, seed).await?;
            let problems: Vec<String> = report
                .transcripts
                .iter()
                .flat_map(|t| t.order_violations())
                .collect();
            write_out(out.as_deref(), &to_json(&report))?;
            eprintln!(
                "session {}: {} transcripts in {:.0}ms",
                report.session_id,
                report.transcripts.len(),
                report.elapsed_ms
            );
            if problems.is_empty() {
                Ok(())
            } else {
                Err(SimError::VerifyFailed(problems.join("; ")))
            }
        }
        Command::Verify { log, data_dir } => {
            let path = resolve_log(&log, data_dir.as_deref());
            let records = load_log(&path)?;
            let verification = verify_records(&records)?;
            println!("{}: {}", path.display(), verification.summary());
            if verification.is_ok() {
                Ok(())
            } else {
                Err(SimError::VerifyFailed(format!("{} does not verify", path.display())))
            }
        }
    }
}

async fn serve(config: Option<PathBuf>, data_dir: Option<PathBuf>, bind: Option<String>) -> Result<(), SimError> {
    let mut cfg = match &config {
        Some(path) => GatewayConfig::from_file(path).map_err(|e| SimError::Config(e.to_string()))?,
        None => GatewayConfig::new("data", ""),
    }
    .with_env();
    if let Some(dir) = data_dir {
        cfg.data_dir = dir;
    }
    if let Some(addr) = bind {
        cfg.bind_address = addr;
    }
    let gateway = parley_gateway::start(cfg).await.map_err(|e| match e {
        parley_gateway::GatewayError::Bind { .. } => SimError::ConnectFailed {
            url: "listen".into(),
            reason: e.to_string(),
        },
        other => SimError::Config(other.to_string()),
    })?;
    eprintln!("parley gateway on {} (chat at {})", gateway.http_url(), gateway.ws_url());
    tokio::signal::ctrl_c()
        .await
        .map_err(|e| SimError::io("signal", e))?;
    gateway.shutdown().await;
    Ok(())
}

fn read_create_request(path: &Path) -> Result<CreateSessionRequest, SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let parsed = if is_json {
        serde_json::from_str::<CreateSessionRequest>(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str::<CreateSessionRequest>(&text).map_err(|e| e.to_string())
    };
    match parsed {
        Ok(r) => Ok(r),
        Err(direct) if !is_json => match Scenario::from_toml(&text) {
            Ok(s) => Ok(s.create_request()),
            Err(_) => Err(SimError::ScriptInvalid(format!("{}: {direct}", path.display()))),
        },
        Err(e) => Err(SimError::ScriptInvalid(format!("{}: {e}", path.display()))),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<(), SimError> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| SimError::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|()| stdout.flush())
                .map_err(|e| SimError::io("stdout", e))
        }
    }
}
