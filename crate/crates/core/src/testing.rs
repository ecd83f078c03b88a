//! Scripted HTTP server for exercising the HTTP backends in tests.
//!
//! Each route has a queue of canned responses served in order; once a
//! queue is empty the route's fallback is used, or `500` if there is none.
//! Every request is recorded.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct MockResponse {
    pub status: u16,
    pub body: String,
}

impl MockResponse {
    pub fn json(value: Value) -> Self {
        Self {
            status: 200,
            body: value.to_string(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: format!("{{\"error\":\"status {status}\"}}"),
        }
    }

    /// A `/v1/completions` reply with a single choice.
    pub fn completion(text: &str, finish_reason: &str, completion_tokens: Option<u64>) -> Self {
        let mut v = serde_json::json!({
            "choices": [{ "text": text, "finish_reason": finish_reason }],
        });
        if let Some(n) = completion_tokens {
            v["usage"] = serde_json::json!({ "completion_tokens": n, "prompt_tokens": 0 });
        }
        Self::json(v)
    }

    /// A `/score` reply.
    pub fn reward(value: f64) -> Self {
        Self::json(serde_json::json!({ "reward": value }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: Value,
}

#[derive(Default)]
struct State {
    scripts: HashMap<String, VecDeque<MockResponse>>,
    fallbacks: HashMap<String, MockResponse>,
    requests: Vec<RecordedRequest>,
}

pub struct MockServer {
    addr: String,
    state: Arc<Mutex<State>>,
}

impl MockServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let state = Arc::new(Mutex::new(State::default()));
        let shared = Arc::clone(&state);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let shared = Arc::clone(&shared);
                thread::spawn(move || {
                    let _ = serve(stream, &shared);
                });
            }
        });
        Self { addr, state }
    }

    pub fn base_url(&self) -> &str {
        &self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.addr, path)
    }

    pub fn script(&self, path: &str, responses: impl IntoIterator<Item = MockResponse>) {
        self.state
            .lock()
            .unwrap()
            .scripts
            .entry(path.to_string())
            .or_default()
            .extend(responses);
    }

    pub fn fallback(&self, path: &str, response: MockResponse) {
        self.state
            .lock()
            .unwrap()
            .fallbacks
            .insert(path.to_string(), response);
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn request_count(&self, path: &str) -> usize {
        self.state
            .lock()
            .unwrap()
            .requests
            .iter()
            .filter(|r| r.path == path)
            .count()
    }
}

fn serve(stream: TcpStream, state: &Mutex<State>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 || header == "\r\n" || header == "\n" {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);

    let response = {
        let mut st = state.lock().unwrap();
        st.requests.push(RecordedRequest {
            path: path.clone(),
            body,
        });
        st.scripts
            .get_mut(&path)
            .and_then(VecDeque::pop_front)
            .or_else(|| st.fallbacks.get(&path).cloned())
            .unwrap_or_else(|| MockResponse::status(500))
    };
    let reason = match response.status {
        200 => "OK",
        400..=499 => "Client Error",
        _ => "Server Error",
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response.status,
        reason,
        response.body.len(),
        response.body
    )?;
    out.flush()
}
