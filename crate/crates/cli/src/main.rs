use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use labrun::config::Config;
use labrun::gateway::{run_adapter, AdapterConfig};
use labrun::service::LabServer;
use labrun::simlab::{SimConfig, SimLab};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "labrun",
    version,
    about = "Run and steer lab workflows and screening campaigns"
)]
struct Cli {
    /// TOML config file. `LAB_*` environment variables override it.
    #[arg(long, short, global = true, env = "LAB_CONFIG")]
    config: Option<PathBuf>,

    /// API base URL for client commands. Defaults to the configured bind and port.
    #[arg(long, global = true, env = "LAB_API_URL")]
    api: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the orchestrator (HTTP API and adapter gateway).
    Serve {
        /// Also run the simulated lab adapter in-process.
        #[arg(long)]
        with_sim_lab: bool,
    },
    /// Run only the simulated lab adapter, dialing the configured gateway.
    SimLab {
        /// Gateway address, e.g. 127.0.0.1:7430.
        #[arg(long)]
        gateway: Option<String>,
    },
    /// Submit a workflow YAML file.
    Submit { file: PathBuf },
    /// Start a run of a submitted workflow.
    Run { workflow_id: String },
    /// Show a run's status.
    Status { run_id: String },
    /// Pause, resume or abort a run.
    Action { run_id: String, action: String },
    /// Sign off a manual step.
    Complete {
        run_id: String,
        step_id: String,
        #[arg(long, default_value = "cli")]
        operator: String,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Follow a run's or campaign's event stream.
    Events {
        id: String,
        #[arg(long, default_value_t = 0)]
        from: u64,
    },
    #[command(subcommand)]
    Campaign(CampaignCmd),
    #[command(subcommand)]
    Records(RecordsCmd),
}

#[derive(Subcommand)]
enum CampaignCmd {
    /// Start a campaign from a YAML file.
    Start { file: PathBuf },
    /// Show a campaign's progress and hits.
    Status { campaign_id: String },
    /// Ask a running campaign to stop after its current stage.
    Abort { campaign_id: String },
}

#[derive(Subcommand)]
enum RecordsCmd {
    /// Recompute a chain's hashes.
    Verify { chain: String },
}

struct Client {
    http: reqwest::Client,
    base: String,
    token: String,
}

impl Client {
    fn new(cfg: &Config, api: Option<String>) -> Self {
        let base = api.unwrap_or_else(|| format!("http://{}:{}", cfg.api.bind, cfg.api.port));
        Self {
            http: reqwest::Client::new(),
            base: base.trim_end_matches('/').to_owned(),
            token: cfg.api.token.clone(),
        }
    }

    fn request(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let r = self.http.request(method, format!("{}{path}", self.base));
        if self.token.is_empty() {
            r
        } else {
            r.bearer_auth(&self.token)
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<Value> {
        let resp = req
            .send()
            .await
            .with_context(|| format!("cannot reach {}", self.base))?;
        let status = resp.status();
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        if !status.is_success() {
            bail!("{status}: {}", serde_json::to_string_pretty(&body)?);
        }
        Ok(body)
    }

    async fn get(&self, path: &str) -> Result<Value> {
        self.send(self.request(reqwest::Method::GET, path)).await
    }

    async fn post(&self, path: &str, body: String) -> Result<Value> {
        self.send(self.request(reqwest::Method::POST, path).body(body))
            .await
    }
}

fn print(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read(file: &PathBuf) -> Result<String> {
    std::fs::read_to_string(file).with_context(|| format!("cannot read {}", file.display()))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = Config::load(cli.config.as_deref()).context("loading config")?;
    let client = Client::new(&cfg, cli.api);

    match cli.command {
        Command::Serve { with_sim_lab } => {
            let server = LabServer::start(&cfg, with_sim_lab).await?;
            eprintln!(
                "api on http://{}  gateway on {}",
                server.api_addr, server.gateway_addr
            );
            tokio::signal::ctrl_c().await?;
            server.shutdown();
        }
        Command::SimLab { gateway } => {
            let addr =
                gateway.unwrap_or_else(|| format!("{}:{}", cfg.gateway.bind, cfg.gateway.port));
            let sim = Arc::new(SimLab::new(SimConfig::from(&cfg.sim)));
            let adapter = run_adapter(
                AdapterConfig::new(addr, "sim-lab", cfg.gateway.token.clone()),
                sim,
            );
            tokio::select! {
                _ = tokio::signal::ctrl_c() => adapter.shutdown(),
                r = adapter.join() => r?,
            }
        }
        Command::Submit { file } => print(&client.post("/workflows", read(&file)?).await?)?,
        Command::Run { workflow_id } => print(
            &client
                .post("/runs", json!({ "workflow_id": workflow_id }).to_string())
                .await?,
        )?,
        Command::Status { run_id } => print(&client.get(&format!("/runs/{run_id}")).await?)?,
        Command::Action { run_id, action } => print(
            &client
                .post(
                    &format!("/runs/{run_id}/actions"),
                    json!({ "action": action }).to_string(),
                )
                .await?,
        )?,
        Command::Complete {
            run_id,
            step_id,
            operator,
            note,
        } => {
            let body = json!({ "operator": operator, "note": note }).to_string();
            print(
                &client
                    .post(&format!("/runs/{run_id}/steps/{step_id}/complete"), body)
                    .await?,
            )?
        }
        Command::Events { id, from } => {
            let path = if id.starts_with("run-") {
                format!("/runs/{id}/events?from={from}")
            } else {
                format!("/campaigns/{id}/events?from={from}")
            };
            let mut resp = client.request(reqwest::Method::GET, &path).send().await?;
            if !resp.status().is_success() {
                bail!(
                    "{}: {}",
                    resp.status(),
                    resp.text().await.unwrap_or_default()
                );
            }
            while let Some(chunk) = resp.chunk().await? {
                print!("{}", String::from_utf8_lossy(&chunk));
            }
        }
        Command::Campaign(CampaignCmd::Start { file }) => {
            print(&client.post("/campaigns", read(&file)?).await?)?
        }
        Command::Campaign(CampaignCmd::Status { campaign_id }) => {
            print(&client.get(&format!("/campaigns/{campaign_id}")).await?)?
        }
        Command::Campaign(CampaignCmd::Abort { campaign_id }) => print(
            &client
                .post(&format!("/campaigns/{campaign_id}/abort"), String::new())
                .await?,
        )?,
        Command::Records(RecordsCmd::Verify { chain }) => {
            let report = client.get(&format!("/records/{chain}/verify")).await?;
            print(&report)?;
            if report["ok"] != true {
                std::process::exit(2);
            }
        }
    }
    Ok(())
}
