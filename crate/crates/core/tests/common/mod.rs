//! Shared fixtures: an orchestrator gateway on a loopback port with a
//! simulated lab adapter dialed into it, plus an independent reference
//! implementation of the lab's arithmetic.

#![allow(dead_code)]

pub mod oracle;
pub mod proxy;
pub mod scheduler;
pub mod tamper;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use labrun::gateway::{run_adapter, AdapterConfig, AdapterHandle, Gateway, GatewayConfig};
use labrun::simlab::{SimConfig, SimLab};
use tokio::net::TcpListener;

pub const TOKEN: &str = "test-token";

pub struct Lab {
    pub gateway: Arc<Gateway>,
    pub addr: SocketAddr,
    pub sim: Arc<SimLab>,
    pub adapter: AdapterHandle,
}

pub async fn gateway() -> (Arc<Gateway>, SocketAddr) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let gw = Gateway::new(GatewayConfig::new(TOKEN));
    tokio::spawn(gw.clone().serve(listener));
    (gw, addr)
}

pub async fn wait_for_adapter(gw: &Gateway, id: &str) {
    for _ in 0..500 {
        if gw.adapter_ids().iter().any(|a| a == id) {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("adapter {id} never connected");
}

/// Gateway plus a sim-lab adapter dialing `dial` (the gateway itself if `None`).
pub async fn lab_via(
    gw: Arc<Gateway>,
    addr: SocketAddr,
    dial: Option<SocketAddr>,
    config: SimConfig,
) -> Lab {
    let sim = Arc::new(SimLab::new(config));
    let target = dial.unwrap_or(addr);
    let adapter = run_adapter(
        AdapterConfig::new(target.to_string(), "sim-lab", TOKEN),
        sim.clone(),
    );
    wait_for_adapter(&gw, "sim-lab").await;
    Lab {
        gateway: gw,
        addr,
        sim,
        adapter,
    }
}

pub async fn lab() -> Lab {
    let (gw, addr) = gateway().await;
    lab_via(gw, addr, None, SimConfig::default()).await
}
