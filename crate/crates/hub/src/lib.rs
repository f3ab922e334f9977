//! Control hub: one authoritative machine behind a length-prefixed JSON
//! protocol on TCP and a WebSocket gateway.

pub mod codec;
pub mod protocol;
pub mod runtime;
pub mod server;
pub mod session;

pub use codec::{decode_frame, encode_frame, CodecError, FrameDecoder, MAX_FRAME};
pub use protocol::{Message, MessageType, PROTOCOL_VERSION};
pub use runtime::{spawn_runtime, Control, Refusal, RuntimeConfig, RuntimeHandle, EVENT_QUEUE};
pub use server::{serve, serve_nlu, Hub, HubConfig, HubError};
pub use session::{FrameClient, NluBackend, NluSession, Session};
