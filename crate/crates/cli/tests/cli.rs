use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use deskbot_hub::{decode_frame, encode_frame, Message, MessageType};

fn deskbot() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deskbot"));
    c.env("DESKBOT_LOG", "error");
    c
}

fn run(args: &[&str]) -> String {
    let out = deskbot().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn run_task_prints_one_csv_row_and_ignores_the_thread_count() {
    let args = [
        "run-task", "cup", "--trials", "12", "--seed", "3", "--wer", "0.1", "--format", "csv",
    ];
    let parallel = run(&args);
    let sequential = run(&[&args[..], &["--sequential"]].concat());
    assert_eq!(parallel, sequential);
    let lines: Vec<&str> = parallel.lines().collect();
    assert_eq!(lines[0], "label,LC,B.N.,WER,CSR,CP,CSR-ER,CP-ER,N");
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[0], "Please hand me the water cup");
    assert_eq!(row.last(), Some(&"12"));
    let (csr, cp): (u64, u64) = (row[4].parse().unwrap(), row[5].parse().unwrap());
    assert!(cp <= 12 && csr <= 12);
}

#[test]
fn run_task_writes_one_record_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("trials.jsonl");
    let report = dir.path().join("door.md");
    run(&[
        "run-task",
        "door",
        "--trials",
        "5",
        "--records",
        records.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("transcript").is_some());
    }
    assert!(std::fs::read_to_string(report).unwrap().contains("Open the door"));
}

#[test]
fn campaign_writes_reports_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("campaign.json");
    std::fs::write(
        &config,
        r#"{"name": "tiny", "master_seed": 1, "trials": 4,
            "tables": [{"title": "Light", "task": "switch", "clutter": [0.0, 0.5],
                        "commands": [{"label": "A1", "text": "Please switch on the light", "expected_intent": "light_on"}]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("reports");
    let stdout = run(&[
        "campaign",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("Wrote 4 files"), "{stdout}");
    let csv = std::fs::read_to_string(out.join("01-light.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let out = deskbot().args(["run-task", "cup", "--clutter", "2"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    assert!(!deskbot()
        .args(["run-task", "teapot"])
        .output()
        .unwrap()
        .status
        .success());
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn exchange(stream: &mut TcpStream, msg: &Message) -> Message {
    stream.write_all(&encode_frame(msg).unwrap()).unwrap();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        while let Some((m, used)) = decode_frame(&buf).unwrap() {
            buf.drain(..used);
            if m.id == msg.id {
                return m;
            }
        }
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "connection closed");
        buf.extend_from_slice(&chunk[..n]);
    }
}

#[test]
fn serve_announces_its_ports_and_answers_requests() {
    let child = deskbot()
        .args(["serve", "--tcp", "0", "--ws", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut server = Server(child);
    let mut lines = BufReader::new(server.0.stdout.take().unwrap()).lines();
    let tcp = lines.next().unwrap().unwrap();
    let ws = lines.next().unwrap().unwrap();
    let addr: SocketAddr = tcp.strip_prefix("tcp ").unwrap().parse().unwrap();
    assert!(ws.starts_with("ws ws://127.0.0.1:") && ws.ends_with("/ws"), "{ws}");

    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let ack = exchange(&mut stream, &Message::hello("h"));
    assert_eq!(ack.kind, MessageType::Ack, "{ack:?}");
    let state = exchange(
        &mut stream,
        &Message::request(MessageType::GetState, "s", serde_json::Value::Null),
    );
    assert_eq!(state.kind, MessageType::State);
    assert_eq!(state.body["state"], "Idle");
}
