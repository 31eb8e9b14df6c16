//! Scripted in-process HTTP server speaking the provider wire protocol.
//!
//! Used by protocol tests: responses come from a handler closure, every
//! request is recorded (route, body, `Authorization` header), and the peak
//! number of concurrently handled requests is tracked.

use std::collections::BTreeMap;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Provider, ProviderError, StubProvider};

#[derive(Debug, Clone)]
pub struct FakeRequest {
    pub route: String,
    pub body: Value,
    pub authorization: Option<String>,
    /// Zero-based index of this request among requests to the same route.
    pub route_call: usize,
}

#[derive(Debug, Clone)]
pub struct FakeResponse {
    pub status: u16,
    pub body: String,
    pub delay: Option<Duration>,
}

impl FakeResponse {
    pub fn ok(body: Value) -> Self {
        FakeResponse {
            status: 200,
            body: body.to_string(),
            delay: None,
        }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        FakeResponse {
            status,
            body: body.into(),
            delay: None,
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }
}

type Handler = dyn Fn(&FakeRequest) -> FakeResponse + Send + Sync;

#[derive(Default)]
struct Shared {
    log: Mutex<Vec<FakeRequest>>,
    per_route: Mutex<BTreeMap<String, usize>>,
    active: AtomicUsize,
    peak: AtomicUsize,
}

pub struct FakeServer {
    base_url: String,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl FakeServer {
    pub fn start<F>(handler: F) -> io::Result<Self>
    where
        F: Fn(&FakeRequest) -> FakeResponse + Send + Sync + 'static,
    {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("fake server has no IP address"))?;
        let shared = Arc::new(Shared::default());
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let req = match server.recv_timeout(Duration::from_millis(20)) {
                        Ok(Some(r)) => r,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let shared = Arc::clone(&shared);
                    let handler = Arc::clone(&handler);
                    std::thread::spawn(move || serve(req, &shared, handler.as_ref()));
                }
            })
        };
        Ok(FakeServer {
            base_url: format!("http://{addr}"),
            shared,
            stop,
            thread: Some(thread),
        })
    }

    /// A well-behaved server answering every route with the stub provider.
    pub fn stub() -> io::Result<Self> {
        let stub = StubProvider::default();
        FakeServer::start(move |req| stub_response(&stub, req))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn requests(&self) -> Vec<FakeRequest> {
        self.shared.log.lock().expect("log poisoned").clone()
    }

    pub fn calls(&self, route: &str) -> usize {
        self.shared
            .per_route
            .lock()
            .expect("log poisoned")
            .get(route)
            .copied()
            .unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.shared.log.lock().expect("log poisoned").len()
    }

    /// Highest number of requests being handled at the same moment.
    pub fn peak_concurrency(&self) -> usize {
        self.shared.peak.load(Ordering::SeqCst)
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(mut req: tiny_http::Request, shared: &Shared, handler: &Handler) {
    let now = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
    shared.peak.fetch_max(now, Ordering::SeqCst);
    let route = req.url().trim_start_matches('/').to_string();
    let authorization = req
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().to_string());
    let mut raw = String::new();
    let body = match req.as_reader().read_to_string(&mut raw) {
        Ok(_) => serde_json::from_str(&raw).unwrap_or(Value::Null),
        Err(_) => Value::Null,
    };
    let record = {
        let mut per_route = shared.per_route.lock().expect("log poisoned");
        let n = per_route.entry(route.clone()).or_insert(0);
        let record = FakeRequest {
            route,
            body,
            authorization,
            route_call: *n,
        };
        *n += 1;
        shared.log.lock().expect("log poisoned").push(record.clone());
        record
    };
    let resp = handler(&record);
    if let Some(d) = resp.delay {
        std::thread::sleep(d);
    }
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let out = tiny_http::Response::from_string(resp.body)
        .with_status_code(resp.status)
        .with_header(header);
    shared.active.fetch_sub(1, Ordering::SeqCst);
    let _ = req.respond(out);
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

/// Answer `req` the way the stub provider would, in wire format.
pub fn stub_response(stub: &StubProvider, req: &FakeRequest) -> FakeResponse {
    let b = &req.body;
    let s = |key: &str| b.get(key).and_then(Value::as_str).unwrap_or_default().to_string();
    let model = stub.identity().model_id.clone();
    let result: Result<Value, ProviderError> = match req.route.as_str() {
        "embed_text" => stub.embed_texts(&strings(&b["texts"])).map(|vs| {
            let vectors: Vec<Vec<f64>> = vs.into_iter().map(|v| v.values).collect();
            json!({"model": model, "vectors": vectors})
        }),
        "embed_image" => stub
            .embed_image(&s("image_ref"))
            .map(|v| json!({"model": model, "vector": v.values})),
        "caption" => stub
            .caption_image(&s("image_ref"), &s("prompt"))
            .map(|t| json!({"model": model, "text": t})),
        "tag" => stub
            .tag_image(&s("image_ref"), &strings(&b["vocabulary"]))
            .map(|t| json!({"model": model, "tags": t})),
        "cross_score" => stub
            .cross_score(&s("query"), &strings(&b["docs"]))
            .map(|sc| json!({"model": model, "scores": sc})),
        "preprocess" => stub
            .preprocess_query(&s("query"), &s("prompt"))
            .map(|k| json!({"model": model, "keywords": k.join(", ")})),
        other => return FakeResponse::status(404, format!("unknown route {other}")),
    };
    match result {
        Ok(v) => FakeResponse::ok(v),
        Err(e) => FakeResponse::status(400, json!({"error": e.to_string()}).to_string()),
    }
}

/// Wrap `inner` so the first `n` calls to every route fail with `status`.
pub fn failing_first<F>(n: usize, status: u16, inner: F) -> impl Fn(&FakeRequest) -> FakeResponse + Send + Sync
where
    F: Fn(&FakeRequest) -> FakeResponse + Send + Sync,
{
    move |req| {
        if req.route_call < n {
            FakeResponse::status(status, "scripted failure")
        } else {
            inner(req)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{HttpProvider, ProviderEndpoint};
    use super::*;

    #[test]
    fn stub_server_round_trip() {
        let server = FakeServer::stub().unwrap();
        let client = HttpProvider::standalone(ProviderEndpoint::new(server.base_url(), "fake", "stub-trigram-v1"));
        let stub = StubProvider::default();
        let texts: Vec<String> = ["red dress", "water bottle"].iter().map(|s| s.to_string()).collect();
        assert_eq!(client.embed_texts(&texts).unwrap(), stub.embed_texts(&texts).unwrap());
        assert_eq!(
            client.preprocess_query("Apple iPhone 11!", "p").unwrap(),
            vec!["apple", "iphone", "11"]
        );
        assert_eq!(server.calls("embed_text"), 1);
        assert_eq!(server.calls("preprocess"), 1);
    }

    #[test]
    fn unknown_route_is_404() {
        let server = FakeServer::stub().unwrap();
        let req = FakeRequest {
            route: "nope".into(),
            body: Value::Null,
            authorization: None,
            route_call: 0,
        };
        assert_eq!(stub_response(&StubProvider::default(), &req).status, 404);
        drop(server);
    }
}
