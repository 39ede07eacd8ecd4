//! Shared helpers for integration tests.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use dfr_core::corpus::{Dialogue, Entity, Turn};

/// A local HTTP endpoint that answers chat-completion requests from a
/// script and records every request body.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

/// An OpenAI-style success body carrying `content`.
pub fn chat(content: &str) -> (u16, String) {
    let body = serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
    });
    (200, body.to_string())
}

impl StubServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&requests);
        let script = Arc::new(Mutex::new(VecDeque::from(script)));
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0; length];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                if let Ok(v) = serde_json::from_slice(&body) {
                    seen.lock().unwrap().push(v);
                }
                let (status, reply) = script
                    .lock()
                    .unwrap()
                    .pop_front()
                    .unwrap_or((500, "script exhausted".into()));
                let head = format!(
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self { url, requests }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|r| r["messages"][0]["content"].as_str().unwrap_or_default().to_string())
            .collect()
    }
}

pub fn data_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join(rel)
}

pub fn restaurant(id: &str, name: &str, area: &str, food: &str, price: &str) -> Entity {
    Entity::new(
        id,
        vec![
            ("name".into(), name.into()),
            ("area".into(), area.into()),
            ("food".into(), food.into()),
            ("pricerange".into(), price.into()),
        ],
    )
    .unwrap()
}

/// A three-turn dialogue whose last context has history.
pub fn booking_dialogue() -> Dialogue {
    Dialogue {
        id: "golden".into(),
        domain: "restaurant".into(),
        session_entity_ids: Vec::new(),
        turns: vec![
            Turn {
                user: "i need a cheap restaurant .".into(),
                system: "what kind of food would you like ?".into(),
                gold_entity_ids: None,
            },
            Turn {
                user: "chinese food in the centre please .".into(),
                system: "golden house serves cheap chinese food in the centre .".into(),
                gold_entity_ids: None,
            },
        ],
    }
}
