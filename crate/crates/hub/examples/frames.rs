//! Prints the wire bytes of a few protocol messages.

use deskbot_hub::{encode_frame, Message, MessageType};
use serde_json::json;

fn main() {
    let samples = [
        Message::new(MessageType::Hello, None, serde_json::Value::Null),
        Message::hello("1"),
        Message::request(MessageType::IntentText, "2", json!({ "text": "open the door" })),
        Message::request(MessageType::SetVar, "3", json!({ "target_name": "light" })),
        Message::request(MessageType::Estop, "4", serde_json::Value::Null),
        Message::error(Some("5".into()), "not-ready", "send HELLO first"),
    ];
    for m in &samples {
        let bytes = encode_frame(m).expect("small message");
        let hex: Vec<String> = bytes.iter().map(|b| format!("{b:02x}")).collect();
        println!("{}\n{}\n", m.to_json(), hex.join(" "));
    }
    let machine = deskbot_core::fsm::Machine::desk(
        deskbot_core::perception::Scene::office(),
        deskbot_core::fsm::MachineConfig::default(),
    )
    .expect("desk machine builds");
    let telemetry = serde_json::to_value(machine.telemetry()).expect("telemetry serializes");
    println!("{}", Message::new(MessageType::Telemetry, None, telemetry).to_json());
}
