//! Wires the record store, gateway, executor and HTTP API into one
//! running orchestrator.

use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tracing::info;

use crate::api::{router, AppState};
use crate::clock::{Clock, SystemClock};
use crate::config::Config;
use crate::executor::{Executor, ExecutorConfig};
use crate::gateway::{run_adapter, AdapterConfig, AdapterHandle, Gateway, GatewayConfig};
use crate::records::{RecordError, RecordStore};
use crate::simlab::{SimConfig, SimLab};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Records(#[from] RecordError),
}

pub struct LabServer {
    pub api_addr: SocketAddr,
    pub gateway_addr: SocketAddr,
    pub state: Arc<AppState>,
    pub sim_lab: Option<(Arc<SimLab>, AdapterHandle)>,
    tasks: Vec<JoinHandle<()>>,
}

impl LabServer {
    /// Binds both listeners and starts serving. With `with_sim_lab`, a
    /// simulated lab adapter dials the gateway over loopback TCP.
    pub async fn start(config: &Config, with_sim_lab: bool) -> Result<Self, ServiceError> {
        Self::start_with(
            config,
            with_sim_lab,
            RecordStore::open(&config.records.dir)?,
            Arc::new(SystemClock),
        )
        .await
    }

    pub async fn start_with(
        config: &Config,
        with_sim_lab: bool,
        store: RecordStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let store = Arc::new(store);
        let gateway = Gateway::new(GatewayConfig::new(config.gateway.token.clone()));
        let gw_listener = bind(&config.gateway.bind, config.gateway.port).await?;
        let gateway_addr = gw_listener
            .local_addr()
            .expect("bound socket has an address");
        let api_listener = bind(&config.api.bind, config.api.port).await?;
        let api_addr = api_listener
            .local_addr()
            .expect("bound socket has an address");

        let executor = Executor::new(
            store,
            gateway.clone(),
            clock.clone(),
            ExecutorConfig {
                resources: config.resources.clone(),
                policy: config.scheduler,
            },
        );
        let state = AppState::new(executor, gateway.clone(), clock, config.api.token.clone());
        let app = router(state.clone(), config.api.console_dir.as_deref());

        let mut tasks = Vec::new();
        tasks.push(tokio::spawn(async move {
            if let Err(e) = gateway.serve(gw_listener).await {
                tracing::error!(error = %e, "gateway listener failed");
            }
        }));
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(api_listener, app).await {
                tracing::error!(error = %e, "api server failed");
            }
        }));
        info!(%api_addr, %gateway_addr, "orchestrator listening");

        let sim_lab = with_sim_lab.then(|| {
            let sim = Arc::new(SimLab::new(SimConfig::from(&config.sim)));
            let handle = run_adapter(
                AdapterConfig::new(
                    gateway_addr.to_string(),
                    "sim-lab",
                    config.gateway.token.clone(),
                ),
                sim.clone(),
            );
            (sim, handle)
        });
        Ok(Self {
            api_addr,
            gateway_addr,
            state,
            sim_lab,
            tasks,
        })
    }

    /// Runs until the process is interrupted.
    pub async fn wait(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }

    pub fn shutdown(&self) {
        if let Some((_, h)) = &self.sim_lab {
            h.shutdown();
        }
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn bind(host: &str, port: u16) -> Result<TcpListener, ServiceError> {
    let addr = format!("{host}:{port}");
    TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })
}
