//! TCP relay between an adapter and the gateway that can cut the
//! connection in the middle of a response frame.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

pub struct FaultProxy {
    pub addr: SocketAddr,
    /// Connections cut so far.
    pub kills: Arc<AtomicUsize>,
    /// RSP frames seen from the adapter, across connections.
    pub responses: Arc<AtomicUsize>,
}

/// Relays to `upstream`. Every `every`-th RSP coming from the adapter is cut
/// after half its body, until `budget` cuts have happened. `every == 0`
/// never cuts.
pub async fn fault_proxy(upstream: SocketAddr, every: usize, budget: usize) -> FaultProxy {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let kills = Arc::new(AtomicUsize::new(0));
    let responses = Arc::new(AtomicUsize::new(0));
    let (k, r) = (kills.clone(), responses.clone());
    tokio::spawn(async move {
        loop {
            let Ok((client, _)) = listener.accept().await else {
                return;
            };
            let Ok(server) = TcpStream::connect(upstream).await else {
                continue;
            };
            tokio::spawn(relay(client, server, every, budget, k.clone(), r.clone()));
        }
    });
    FaultProxy {
        addr,
        kills,
        responses,
    }
}

fn is_response(body: &[u8]) -> bool {
    serde_json::from_slice::<serde_json::Value>(body).is_ok_and(|v| v["type"] == "RSP")
}

async fn relay(
    client: TcpStream,
    server: TcpStream,
    every: usize,
    budget: usize,
    kills: Arc<AtomicUsize>,
    responses: Arc<AtomicUsize>,
) {
    let _ = client.set_nodelay(true);
    let _ = server.set_nodelay(true);
    let (mut client_rx, mut client_tx) = client.into_split();
    let (mut server_rx, mut server_tx) = server.into_split();
    let down = tokio::spawn(async move {
        let _ = tokio::io::copy(&mut server_rx, &mut client_tx).await;
    });
    let mut buf = Vec::new();
    let mut chunk = vec![0u8; 64 * 1024];
    'outer: loop {
        let n = match client_rx.read(&mut chunk).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        buf.extend_from_slice(&chunk[..n]);
        while buf.len() >= 4 {
            let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
            if buf.len() < 4 + len {
                break;
            }
            let frame: Vec<u8> = buf.drain(..4 + len).collect();
            if is_response(&frame[4..]) {
                let seen = responses.fetch_add(1, Ordering::SeqCst) + 1;
                if every > 0 && seen % every == 0 && kills.load(Ordering::SeqCst) < budget {
                    kills.fetch_add(1, Ordering::SeqCst);
                    let _ = server_tx.write_all(&frame[..4 + len / 2]).await;
                    break 'outer;
                }
            }
            if server_tx.write_all(&frame).await.is_err() {
                break 'outer;
            }
        }
    }
    down.abort();
}
