//! TCP listener and WebSocket gateway. Each connection owns a session and a
//! writer; the writer interleaves replies (never dropped) with telemetry
//! from a broadcast receiver (oldest frames dropped when the client lags).

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use deskbot_core::fsm::Machine;
use deskbot_core::nlu::NluPipeline;
use futures::stream::SplitSink;
use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinHandle;

use crate::codec::{decode_payload, encode_frame, CodecError, FrameDecoder, MAX_FRAME};
use crate::protocol::{code, Message};
use crate::runtime::{spawn_runtime, RuntimeConfig, RuntimeHandle};
use crate::session::{NluBackend, NluSession, Session};

#[derive(Debug, Error)]
pub enum HubError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HubConfig {
    pub tcp: SocketAddr,
    /// WebSocket gateway address; `None` disables it.
    pub ws: Option<SocketAddr>,
    pub runtime: RuntimeConfig,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            tcp: SocketAddr::from(([127, 0, 0, 1], 7462)),
            ws: Some(SocketAddr::from(([127, 0, 0, 1], 7463))),
            runtime: RuntimeConfig::default(),
        }
    }
}

/// A running service. Dropping it stops every task.
#[derive(Debug)]
pub struct Hub {
    tcp_addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    runtime: RuntimeHandle,
    tasks: Vec<JoinHandle<()>>,
}

impl Hub {
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// In-process access to the authoritative runtime.
    pub fn runtime(&self) -> &RuntimeHandle {
        &self.runtime
    }

    pub fn shutdown(mut self) {
        self.abort();
    }

    /// Resolves when any service task ends, which only happens on a panic.
    pub async fn join(mut self) {
        let tasks = std::mem::take(&mut self.tasks);
        let _ = futures::future::select_all(tasks).await;
    }

    fn abort(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for Hub {
    fn drop(&mut self) {
        self.abort();
    }
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, HubError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| HubError::Bind { addr, source })
}

/// Binds both listeners and starts the tick loop. Port 0 picks a free port;
/// the bound addresses are on the returned [`Hub`].
pub async fn serve(machine: Machine, nlu: NluBackend, config: HubConfig) -> Result<Hub, HubError> {
    let tcp = bind(config.tcp).await?;
    let ws = match config.ws {
        Some(addr) => Some(bind(addr).await?),
        None => None,
    };
    let tcp_addr = tcp.local_addr()?;
    let ws_addr = ws.as_ref().map(TcpListener::local_addr).transpose()?;
    let (runtime, rt_task) = spawn_runtime(machine, config.runtime);
    let mut tasks = vec![rt_task];
    {
        let runtime = runtime.clone();
        let nlu = nlu.clone();
        tasks.push(tokio::spawn(async move {
            loop {
                match tcp.accept().await {
                    Ok((stream, peer)) => {
                        let session = Session::new(runtime.clone(), nlu.clone());
                        tokio::spawn(tcp_client(stream, peer, session, runtime.clone()));
                    }
                    Err(e) => tracing::warn!(error = %e, "accept failed"),
                }
            }
        }));
    }
    if let Some(listener) = ws {
        let app = Router::new().route("/ws", get(ws_upgrade)).with_state(Gateway {
            runtime: runtime.clone(),
            nlu,
        });
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!(error = %e, "websocket gateway stopped");
            }
        }));
    }
    tracing::info!(%tcp_addr, ?ws_addr, "hub listening");
    Ok(Hub {
        tcp_addr,
        ws_addr,
        runtime,
        tasks,
    })
}

enum Out {
    Reply(Message),
    /// Start forwarding telemetry; sent once, after HELLO succeeds.
    Subscribe,
    /// Flush and close.
    Close,
}

/// Destination for outgoing messages. `false` means the peer is gone.
trait MessageSink {
    async fn deliver(&mut self, msg: Message) -> bool;
}

impl MessageSink for OwnedWriteHalf {
    async fn deliver(&mut self, msg: Message) -> bool {
        match encode_frame(&msg) {
            Ok(bytes) => self.write_all(&bytes).await.is_ok(),
            Err(e) => {
                tracing::error!(error = %e, "outgoing message too large");
                true
            }
        }
    }
}

impl MessageSink for SplitSink<WebSocket, WsMessage> {
    async fn deliver(&mut self, msg: Message) -> bool {
        self.send(WsMessage::Text(msg.to_json().into())).await.is_ok()
    }
}

/// Forwards replies and, once subscribed, broadcast events to `sink`.
async fn writer<S: MessageSink>(mut rx: mpsc::UnboundedReceiver<Out>, runtime: RuntimeHandle, mut sink: S) -> S {
    let mut events: Option<broadcast::Receiver<Message>> = None;
    loop {
        let msg = tokio::select! {
            biased;
            out = rx.recv() => match out {
                Some(Out::Reply(m)) => m,
                Some(Out::Subscribe) => {
                    events.get_or_insert_with(|| runtime.subscribe());
                    continue;
                }
                Some(Out::Close) | None => return sink,
            },
            ev = async { events.as_mut().expect("guarded").recv().await }, if events.is_some() => match ev {
                Ok(m) => m,
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!(dropped = n, "slow client; telemetry dropped");
                    continue;
                }
                Err(broadcast::error::RecvError::Closed) => return sink,
            },
        };
        if !sink.deliver(msg).await {
            return sink;
        }
    }
}

async fn respond(session: &mut Session, out: &mpsc::UnboundedSender<Out>, msg: Message) {
    let was_ready = session.ready();
    let reply = session.handle(msg).await;
    let _ = out.send(Out::Reply(reply));
    if !was_ready && session.ready() {
        let _ = out.send(Out::Subscribe);
    }
}

fn protocol_error(e: &CodecError) -> Message {
    let c = if e.is_fatal() { code::OVERSIZE } else { code::PROTOCOL };
    Message::error(None, c, e.to_string())
}

async fn tcp_client(stream: TcpStream, peer: SocketAddr, mut session: Session, runtime: RuntimeHandle) {
    tracing::debug!(%peer, "tcp client connected");
    let _ = stream.set_nodelay(true);
    let (mut rd, wr) = stream.into_split();
    let (out, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(writer(rx, runtime, wr));
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    'conn: loop {
        let n = match rd.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        decoder.push(&buf[..n]);
        loop {
            match decoder.next_message() {
                Ok(Some(msg)) => respond(&mut session, &out, msg).await,
                Ok(None) => break,
                Err(e) => {
                    tracing::warn!(%peer, error = %e, "protocol error");
                    let _ = out.send(Out::Reply(protocol_error(&e)));
                    if e.is_fatal() {
                        let _ = out.send(Out::Close);
                        break 'conn;
                    }
                }
            }
        }
    }
    drop(out);
    if let Ok(mut wr) = writer.await {
        let _ = wr.shutdown().await;
    }
    tracing::debug!(%peer, "tcp client disconnected");
}

#[derive(Clone)]
struct Gateway {
    runtime: RuntimeHandle,
    nlu: NluBackend,
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(gw): State<Gateway>) -> impl IntoResponse {
    ws.max_message_size(MAX_FRAME)
        .on_upgrade(move |socket| ws_client(socket, gw))
}

/// One JSON message per WebSocket frame, identical to the TCP payloads.
async fn ws_client(socket: WebSocket, gw: Gateway) {
    let (sink, mut stream) = socket.split();
    let (out, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(writer(rx, gw.runtime.clone(), sink));
    let mut session = Session::new(gw.runtime, gw.nlu);
    let mut offset = 0u64;
    while let Some(Ok(frame)) = stream.next().await {
        let payload = match frame {
            WsMessage::Text(t) => t.as_bytes().to_vec(),
            WsMessage::Binary(b) => b.to_vec(),
            WsMessage::Close(_) => break,
            _ => continue,
        };
        match decode_payload(&payload, offset) {
            Ok(msg) => respond(&mut session, &out, msg).await,
            Err(e) => {
                let _ = out.send(Out::Reply(protocol_error(&e)));
            }
        }
        offset += payload.len() as u64;
    }
    drop(out);
    if let Ok(mut sink) = writer.await {
        let _ = sink.close().await;
    }
}

/// Standalone NLU server: accepts framed HELLO and INTENT_TEXT requests.
pub async fn serve_nlu(pipeline: Arc<NluPipeline>, addr: SocketAddr) -> Result<(SocketAddr, JoinHandle<()>), HubError> {
    let listener = bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                continue;
            };
            let mut session = NluSession::new(pipeline.clone());
            tokio::spawn(async move {
                let (mut rd, mut wr) = stream.into_split();
                let mut decoder = FrameDecoder::new();
                let mut buf = vec![0u8; 16 * 1024];
                loop {
                    let n = match rd.read(&mut buf).await {
                        Ok(0) | Err(_) => return,
                        Ok(n) => n,
                    };
                    decoder.push(&buf[..n]);
                    loop {
                        let (reply, fatal) = match decoder.next_message() {
                            Ok(Some(msg)) => (session.handle(msg), false),
                            Ok(None) => break,
                            Err(e) => (protocol_error(&e), e.is_fatal()),
                        };
                        let bytes = encode_frame(&reply).expect("replies are small");
                        if wr.write_all(&bytes).await.is_err() || fatal {
                            return;
                        }
                    }
                }
            });
        }
    });
    tracing::info!(addr = %local, "nlu server listening");
    Ok((local, task))
}
