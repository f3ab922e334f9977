use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum MessageType {
    Hello,
    Ack,
    Error,
    IntentText,
    Command,
    SetVar,
    GetState,
    State,
    Telemetry,
    Estop,
    Alert,
    /// Any other string; answered with an `unsupported` error.
    Other(String),
}

impl MessageType {
    pub const KNOWN: [MessageType; 11] = [
        MessageType::Hello,
        MessageType::Ack,
        MessageType::Error,
        MessageType::IntentText,
        MessageType::Command,
        MessageType::SetVar,
        MessageType::GetState,
        MessageType::State,
        MessageType::Telemetry,
        MessageType::Estop,
        MessageType::Alert,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            MessageType::Hello => "HELLO",
            MessageType::Ack => "ACK",
            MessageType::Error => "ERROR",
            MessageType::IntentText => "INTENT_TEXT",
            MessageType::Command => "COMMAND",
            MessageType::SetVar => "SET_VAR",
            MessageType::GetState => "GET_STATE",
            MessageType::State => "STATE",
            MessageType::Telemetry => "TELEMETRY",
            MessageType::Estop => "ESTOP",
            MessageType::Alert => "ALERT",
            MessageType::Other(s) => s,
        }
    }
}

impl From<String> for MessageType {
    fn from(s: String) -> Self {
        MessageType::KNOWN
            .into_iter()
            .find(|t| t.as_str() == s)
            .unwrap_or(MessageType::Other(s))
    }
}

impl From<MessageType> for String {
    fn from(t: MessageType) -> Self {
        t.as_str().to_string()
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One protocol message. `id` correlates a request with its single reply;
/// unsolicited TELEMETRY and ALERT carry none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    #[serde(rename = "type")]
    pub kind: MessageType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub body: Map<String, Value>,
}

/// Machine-readable codes carried in ERROR bodies.
pub mod code {
    pub const NOT_READY: &str = "not-ready";
    pub const UNSUPPORTED: &str = "unsupported";
    pub const PROTOCOL: &str = "protocol";
    pub const OVERSIZE: &str = "oversize";
    pub const VERSION: &str = "version";
    pub const INVALID: &str = "invalid";
    pub const REJECTED: &str = "rejected";
    pub const UNKNOWN_INTENT: &str = "unknown-intent";
    pub const NLU: &str = "nlu";
    pub const UNAVAILABLE: &str = "unavailable";
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        Value::Null => Map::new(),
        other => Map::from_iter([("value".to_string(), other)]),
    }
}

impl Message {
    pub fn new(kind: MessageType, id: Option<String>, body: Value) -> Self {
        Self {
            kind,
            id,
            body: object(body),
        }
    }

    pub fn hello(id: impl Into<String>) -> Self {
        Self::new(
            MessageType::Hello,
            Some(id.into()),
            serde_json::json!({ "protocol_version": PROTOCOL_VERSION }),
        )
    }

    pub fn request(kind: MessageType, id: impl Into<String>, body: Value) -> Self {
        Self::new(kind, Some(id.into()), body)
    }

    pub fn ack(id: Option<String>, body: Value) -> Self {
        Self::new(MessageType::Ack, id, body)
    }

    pub fn error(id: Option<String>, code: &str, message: impl Into<String>) -> Self {
        Self::new(
            MessageType::Error,
            id,
            serde_json::json!({ "code": code, "message": message.into() }),
        )
    }

    pub fn is_reply(&self) -> bool {
        matches!(self.kind, MessageType::Ack | MessageType::Error | MessageType::State)
    }

    /// Error code of an ERROR message.
    pub fn error_code(&self) -> Option<&str> {
        (self.kind == MessageType::Error).then(|| self.body.get("code").and_then(Value::as_str))?
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}
