//! Scriptable completion server for exercising [`super::RemoteClient`]
//! without a model. Each request is handled on its own thread so the
//! server can observe client-side concurrency.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

#[derive(Clone, Debug)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
    /// Hold the request this long before answering.
    pub delay: Duration,
}

impl StubReply {
    pub fn json(body: Value) -> Self {
        StubReply {
            status: 200,
            body: body.to_string(),
            delay: Duration::ZERO,
        }
    }

    pub fn status(status: u16) -> Self {
        StubReply {
            status,
            body: json!({"error": "stub failure"}).to_string(),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Completion response carrying one top-logprob map.
    pub fn logprobs(entries: &[(&str, f64)]) -> Self {
        let map: serde_json::Map<String, Value> =
            entries.iter().map(|(t, v)| (t.to_string(), json!(v))).collect();
        Self::json(json!({
            "choices": [{
                "text": entries.first().map_or("", |e| e.0),
                "logprobs": { "top_logprobs": [map] }
            }]
        }))
    }

    pub fn completions(texts: &[String]) -> Self {
        let choices: Vec<Value> = texts.iter().map(|t| json!({"text": t})).collect();
        Self::json(json!({ "choices": choices }))
    }
}

type Handler = dyn Fn(usize, &Value) -> StubReply + Send + Sync;

#[derive(Debug, Default)]
pub struct StubStats {
    pub requests: AtomicUsize,
    pub active: AtomicUsize,
    pub max_active: AtomicUsize,
    /// Request bodies in arrival order.
    pub bodies: Mutex<Vec<Value>>,
}

impl StubStats {
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_active.load(Ordering::SeqCst)
    }
}

pub struct StubServer {
    server: Arc<Server>,
    url: String,
    stats: Arc<StubStats>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Start on an ephemeral localhost port. `handler` receives the
    /// zero-based request index and the parsed JSON body.
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(usize, &Value) -> StubReply + Send + Sync + 'static,
    {
        let server = Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub bound to a non-IP address"))?;
        let server = Arc::new(server);
        let stats = Arc::new(StubStats::default());
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let server = Arc::clone(&server);
            let stats = Arc::clone(&stats);
            thread::spawn(move || {
                let mut workers = Vec::new();
                for mut request in server.incoming_requests() {
                    let stats = Arc::clone(&stats);
                    let handler = Arc::clone(&handler);
                    workers.push(thread::spawn(move || {
                        let index = stats.requests.fetch_add(1, Ordering::SeqCst);
                        let now = stats.active.fetch_add(1, Ordering::SeqCst) + 1;
                        stats.max_active.fetch_max(now, Ordering::SeqCst);
                        let mut raw = String::new();
                        let _ = request.as_reader().read_to_string(&mut raw);
                        let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
                        stats.bodies.lock().expect("stub lock").push(body.clone());
                        let reply = handler(index, &body);
                        if !reply.delay.is_zero() {
                            thread::sleep(reply.delay);
                        }
                        stats.active.fetch_sub(1, Ordering::SeqCst);
                        let header = Header::from_bytes("Content-Type", "application/json")
                            .expect("static header");
                        let response = Response::from_string(reply.body)
                            .with_status_code(reply.status)
                            .with_header(header);
                        let _ = request.respond(response);
                    }));
                }
                for w in workers {
                    let _ = w.join();
                }
            })
        };
        Ok(StubServer {
            server,
            url: format!("http://127.0.0.1:{port}/v1/completions"),
            stats,
            accept: Some(accept),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn stats(&self) -> &StubStats {
        &self.stats
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}
