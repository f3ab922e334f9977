use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use deskbot_core::nlu::{Command, IntentResult, NluError, NluPipeline};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use crate::codec::{encode_frame, FrameDecoder};
use crate::protocol::{code, Message, MessageType, PROTOCOL_VERSION};
use crate::runtime::{Control, Refusal, RuntimeHandle};

const REMOTE_TIMEOUT: Duration = Duration::from_secs(5);

/// Where INTENT_TEXT is interpreted: in this process, or by a separate NLU
/// server speaking the same protocol.
#[derive(Debug, Clone)]
pub enum NluBackend {
    Local(Arc<NluPipeline>),
    Remote(SocketAddr),
}

impl NluBackend {
    pub async fn interpret(&self, text: &str) -> Result<IntentResult, Refusal> {
        match self {
            NluBackend::Local(p) => p.interpret_text(text).map_err(nlu_refusal),
            NluBackend::Remote(addr) => tokio::time::timeout(REMOTE_TIMEOUT, remote_interpret(*addr, text))
                .await
                .map_err(|_| Refusal {
                    code: code::UNAVAILABLE,
                    message: format!("nlu server {addr} timed out"),
                })?,
        }
    }
}

fn nlu_refusal(e: NluError) -> Refusal {
    Refusal {
        code: code::NLU,
        message: e.to_string(),
    }
}

async fn remote_interpret(addr: SocketAddr, text: &str) -> Result<IntentResult, Refusal> {
    let io = |e: std::io::Error| Refusal {
        code: code::UNAVAILABLE,
        message: format!("nlu server {addr}: {e}"),
    };
    let mut stream = TcpStream::connect(addr).await.map_err(io)?;
    let mut client = FrameClient::default();
    client
        .send(&mut stream, &Message::hello("nlu-hello"))
        .await
        .map_err(io)?;
    let hello = client.recv(&mut stream).await.map_err(io)?;
    if hello.kind != MessageType::Ack {
        return Err(refusal_from(&hello));
    }
    let req = Message::request(MessageType::IntentText, "nlu", json!({ "text": text }));
    client.send(&mut stream, &req).await.map_err(io)?;
    let reply = client.recv(&mut stream).await.map_err(io)?;
    if reply.kind != MessageType::Ack {
        return Err(refusal_from(&reply));
    }
    serde_json::from_value(Value::Object(reply.body)).map_err(|e| Refusal {
        code: code::NLU,
        message: format!("nlu server reply: {e}"),
    })
}

fn refusal_from(m: &Message) -> Refusal {
    Refusal {
        code: match m.error_code() {
            Some(code::NLU) => code::NLU,
            Some(code::VERSION) => code::VERSION,
            _ => code::UNAVAILABLE,
        },
        message: m
            .body
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("nlu server error")
            .to_string(),
    }
}

/// Minimal framed request/response helper over any byte stream.
#[derive(Debug, Default)]
pub struct FrameClient {
    decoder: FrameDecoder,
}

impl FrameClient {
    pub async fn send<W: AsyncWriteExt + Unpin>(&mut self, w: &mut W, msg: &Message) -> std::io::Result<()> {
        let frame = encode_frame(msg).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
        w.write_all(&frame).await
    }

    /// Next message of any kind.
    pub async fn recv<R: AsyncReadExt + Unpin>(&mut self, r: &mut R) -> std::io::Result<Message> {
        let mut buf = [0u8; 8192];
        loop {
            match self.decoder.next_message() {
                Ok(Some(m)) => return Ok(m),
                Ok(None) => {}
                Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            }
            let n = r.read(&mut buf).await?;
            if n == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
            self.decoder.push(&buf[..n]);
        }
    }

    /// Next reply (ACK, ERROR or STATE), skipping unsolicited messages.
    pub async fn recv_reply<R: AsyncReadExt + Unpin>(&mut self, r: &mut R) -> std::io::Result<Message> {
        loop {
            let m = self.recv(r).await?;
            if m.is_reply() {
                return Ok(m);
            }
        }
    }
}

fn refuse(id: Option<String>, r: Refusal) -> Message {
    Message::error(id, r.code, r.message)
}

fn check_hello(msg: &Message) -> Result<(), Refusal> {
    match msg.body.get("protocol_version").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => Ok(()),
        other => Err(Refusal {
            code: code::VERSION,
            message: format!("protocol_version {other:?} unsupported; this server speaks {PROTOCOL_VERSION}"),
        }),
    }
}

fn hello_ack(msg: &Message, server: &str) -> Message {
    Message::ack(
        msg.id.clone(),
        json!({ "protocol_version": PROTOCOL_VERSION, "server": server }),
    )
}

/// Per-connection protocol state for the control hub. Every request gets
/// exactly one reply carrying its id.
#[derive(Debug)]
pub struct Session {
    ready: bool,
    runtime: RuntimeHandle,
    nlu: NluBackend,
}

impl Session {
    pub fn new(runtime: RuntimeHandle, nlu: NluBackend) -> Self {
        Self {
            ready: false,
            runtime,
            nlu,
        }
    }

    /// HELLO has been accepted.
    pub fn ready(&self) -> bool {
        self.ready
    }

    pub async fn handle(&mut self, msg: Message) -> Message {
        let id = msg.id.clone();
        if msg.kind == MessageType::Hello {
            return match check_hello(&msg) {
                Ok(()) => {
                    self.ready = true;
                    hello_ack(&msg, "deskbot-hub")
                }
                Err(r) => refuse(id, r),
            };
        }
        let client_kind = matches!(
            msg.kind,
            MessageType::IntentText
                | MessageType::Command
                | MessageType::SetVar
                | MessageType::GetState
                | MessageType::Estop
        );
        if !client_kind {
            return Message::error(id, code::UNSUPPORTED, format!("{} is not a request type", msg.kind));
        }
        if !self.ready {
            return Message::error(id, code::NOT_READY, "send HELLO first");
        }
        let result = match msg.kind {
            MessageType::IntentText => return self.intent_text(msg).await,
            MessageType::Command => match serde_json::from_value::<Command>(Value::Object(msg.body)) {
                Ok(cmd) => self.runtime.call(Control::Dispatch(cmd)).await,
                Err(e) => Err(Refusal {
                    code: code::INVALID,
                    message: format!("command: {e}"),
                }),
            },
            MessageType::SetVar if msg.body.is_empty() => Err(Refusal {
                code: code::INVALID,
                message: "SET_VAR needs at least one variable".into(),
            }),
            MessageType::SetVar => self.runtime.call(Control::SetVars(msg.body)).await,
            MessageType::GetState => {
                return match self.runtime.call(Control::GetState).await {
                    Ok(body) => Message::new(MessageType::State, id, body),
                    Err(r) => refuse(id, r),
                }
            }
            MessageType::Estop => self.runtime.call(Control::Estop).await,
            _ => unreachable!("filtered above"),
        };
        match result {
            Ok(body) => Message::ack(id, body),
            Err(r) => refuse(id, r),
        }
    }

    async fn intent_text(&mut self, msg: Message) -> Message {
        let id = msg.id.clone();
        let Some(text) = msg.body.get("text").and_then(Value::as_str) else {
            return Message::error(id, code::INVALID, "INTENT_TEXT needs a string \"text\"");
        };
        let result = match self.nlu.interpret(text).await {
            Ok(r) => r,
            Err(r) => return refuse(id, r),
        };
        let mut body = serde_json::to_value(&result).expect("intent result serializes");
        if result.intent.is_none() {
            let obj = body.as_object_mut().expect("object");
            obj.insert("code".into(), json!(code::UNKNOWN_INTENT));
            obj.insert(
                "message".into(),
                json!(format!("confidence {:.3} below threshold", result.confidence)),
            );
            return Message::new(MessageType::Error, id, body);
        }
        match self.runtime.call(Control::Dispatch(result.command.clone())).await {
            Ok(dispatch) => {
                body.as_object_mut()
                    .expect("object")
                    .insert("dispatch".into(), dispatch);
                Message::ack(id, body)
            }
            Err(r) => refuse(id, r),
        }
    }
}

/// Protocol state for a standalone NLU server: HELLO, then INTENT_TEXT
/// answered with the full interpretation.
#[derive(Debug)]
pub struct NluSession {
    ready: bool,
    pipeline: Arc<NluPipeline>,
}

impl NluSession {
    pub fn new(pipeline: Arc<NluPipeline>) -> Self {
        Self { ready: false, pipeline }
    }

    pub fn handle(&mut self, msg: Message) -> Message {
        let id = msg.id.clone();
        match msg.kind {
            MessageType::Hello => match check_hello(&msg) {
                Ok(()) => {
                    self.ready = true;
                    hello_ack(&msg, "deskbot-nlu")
                }
                Err(r) => refuse(id, r),
            },
            MessageType::IntentText if !self.ready => Message::error(id, code::NOT_READY, "send HELLO first"),
            MessageType::IntentText => match msg.body.get("text").and_then(Value::as_str) {
                Some(text) => match self.pipeline.interpret_text(text) {
                    Ok(r) => Message::ack(id, serde_json::to_value(r).expect("intent result serializes")),
                    Err(e) => refuse(id, nlu_refusal(e)),
                },
                None => Message::error(id, code::INVALID, "INTENT_TEXT needs a string \"text\""),
            },
            other => Message::error(id, code::UNSUPPORTED, format!("{other} is not served here")),
        }
    }
}
