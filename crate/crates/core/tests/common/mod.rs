//! A scripted loopback HTTP stub for exercising the remote chat backend
//! without any real network dependency.

// Each test binary compiles this module on its own and uses a subset of it.
#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// One scripted reply.
pub struct StubResponse {
    pub status: u16,
    pub body: String,
    /// Wait this long after reading the request before replying; lets tests
    /// trip the client-side timeout.
    pub delay: Duration,
}

impl StubResponse {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(status: u16, body: impl Into<String>, delay: Duration) -> Self {
        Self {
            status,
            body: body.into(),
            delay,
        }
    }
}

/// Handle to a running stub.
pub struct Stub {
    pub url: String,
    /// Connections served so far (one per backend attempt).
    pub hits: Arc<AtomicUsize>,
    /// Raw requests (headers + body) in arrival order.
    pub requests: Arc<Mutex<Vec<String>>>,
}

impl Stub {
    pub fn hit_count(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Serves the scripted responses in order on a fresh loopback port, then
/// stops listening.
pub fn scripted_stub(responses: Vec<StubResponse>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    assert!(addr.ip().is_loopback(), "stub must stay on loopback");
    let hits = Arc::new(AtomicUsize::new(0));
    let requests = Arc::new(Mutex::new(Vec::new()));
    let stub = Stub {
        url: format!("http://{addr}/v1/chat/completions"),
        hits: Arc::clone(&hits),
        requests: Arc::clone(&requests),
    };
    std::thread::spawn(move || {
        for resp in responses {
            let Ok((mut conn, _)) = listener.accept() else {
                return;
            };
            hits.fetch_add(1, Ordering::SeqCst);
            let request = read_http_request(&mut conn);
            requests.lock().unwrap().push(request);
            if !resp.delay.is_zero() {
                std::thread::sleep(resp.delay);
            }
            let reason = match resp.status {
                200 => "OK",
                400 => "Bad Request",
                404 => "Not Found",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                503 => "Service Unavailable",
                _ => "Status",
            };
            let payload = format!(
                "HTTP/1.1 {} {reason}\r\ncontent-type: application/json\r\n\
                 content-length: {}\r\nconnection: close\r\n\r\n{}",
                resp.status,
                resp.body.len(),
                resp.body
            );
            let _ = conn.write_all(payload.as_bytes());
        }
    });
    stub
}

fn read_http_request(conn: &mut TcpStream) -> String {
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    while !buf.ends_with(b"\r\n\r\n") {
        if conn.read(&mut byte).unwrap_or(0) == 0 {
            return String::new();
        }
        buf.push(byte[0]);
    }
    let head = String::from_utf8_lossy(&buf).to_string();
    let content_length: usize = head
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        let _ = conn.read_exact(&mut body);
    }
    head + &String::from_utf8_lossy(&body)
}

/// A minimal chat-completion body whose assistant text is `content`.
pub fn chat_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()
}
