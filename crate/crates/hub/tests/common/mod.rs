#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use deskbot_core::fsm::{Machine, MachineConfig};
use deskbot_core::nlu::NluPipeline;
use deskbot_core::perception::Scene;
use deskbot_hub::{serve, FrameClient, Hub, HubConfig, Message, MessageType, NluBackend, RuntimeConfig};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::time::timeout;

pub const WAIT: Duration = Duration::from_secs(10);

pub fn pipeline() -> Arc<NluPipeline> {
    static NLU: OnceLock<Arc<NluPipeline>> = OnceLock::new();
    NLU.get_or_init(|| Arc::new(NluPipeline::desk_default().expect("desk model trains")))
        .clone()
}

pub fn machine() -> Machine {
    Machine::desk(Scene::office(), MachineConfig::default()).expect("desk machine builds")
}

pub async fn start(runtime: RuntimeConfig) -> Hub {
    start_with(NluBackend::Local(pipeline()), runtime).await
}

pub async fn start_with(nlu: NluBackend, runtime: RuntimeConfig) -> Hub {
    let config = HubConfig {
        tcp: SocketAddr::from(([127, 0, 0, 1], 0)),
        ws: Some(SocketAddr::from(([127, 0, 0, 1], 0))),
        runtime,
    };
    serve(machine(), nlu, config).await.expect("hub starts")
}

pub struct Client {
    pub stream: TcpStream,
    pub frames: FrameClient,
    next_id: u64,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).await.expect("connect");
        stream.set_nodelay(true).unwrap();
        Self {
            stream,
            frames: FrameClient::default(),
            next_id: 0,
        }
    }

    /// Connected and past HELLO.
    pub async fn ready(addr: SocketAddr) -> Self {
        let mut c = Self::connect(addr).await;
        let ack = c.send_recv(Message::hello("hello")).await;
        assert_eq!(ack.kind, MessageType::Ack, "{ack:?}");
        c
    }

    pub async fn send(&mut self, msg: &Message) {
        self.frames.send(&mut self.stream, msg).await.expect("send");
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) {
        use tokio::io::AsyncWriteExt;
        self.stream.write_all(bytes).await.expect("send raw");
    }

    pub async fn recv(&mut self) -> Message {
        timeout(WAIT, self.frames.recv(&mut self.stream))
            .await
            .expect("message in time")
            .expect("message")
    }

    pub async fn recv_reply(&mut self) -> Message {
        timeout(WAIT, self.frames.recv_reply(&mut self.stream))
            .await
            .expect("reply in time")
            .expect("reply")
    }

    pub async fn send_recv(&mut self, msg: Message) -> Message {
        self.send(&msg).await;
        let reply = self.recv_reply().await;
        assert_eq!(reply.id, msg.id, "reply correlates");
        reply
    }

    /// Sends a request with a fresh id and returns the matching reply.
    pub async fn request(&mut self, kind: MessageType, body: Value) -> Message {
        self.next_id += 1;
        let msg = Message::request(kind, format!("r{}", self.next_id), body);
        self.send_recv(msg).await
    }

    pub async fn state(&mut self) -> Value {
        let reply = self.request(MessageType::GetState, Value::Null).await;
        assert_eq!(reply.kind, MessageType::State, "{reply:?}");
        Value::Object(reply.body)
    }

    /// Next TELEMETRY body, skipping other unsolicited messages.
    pub async fn telemetry(&mut self) -> Value {
        loop {
            let m = self.recv().await;
            if m.kind == MessageType::Telemetry {
                return Value::Object(m.body);
            }
        }
    }

    /// Reads telemetry until `pred` holds; panics after [`WAIT`].
    pub async fn telemetry_until(&mut self, mut pred: impl FnMut(&Value) -> bool) -> Value {
        let deadline = tokio::time::Instant::now() + WAIT;
        let mut seen = Vec::new();
        loop {
            assert!(
                tokio::time::Instant::now() < deadline,
                "condition never held; saw {seen:?}"
            );
            let t = self.telemetry().await;
            if pred(&t) {
                return t;
            }
            if seen.last() != Some(&t["state"]) {
                seen.push(t["state"].clone());
            }
        }
    }
}

pub fn press_light_on() -> Value {
    json!({ "function": "PressTarget", "target_class": "light_switch", "press_end": "near" })
}
