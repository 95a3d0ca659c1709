//! Small HTTP layer shared by the gateway device endpoint and the cloud API:
//! a worker pool over `tiny_http`, request/response values independent of
//! the server, and a `ureq` client.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::Serialize;

/// Upper bound on accepted request bodies.
const MAX_BODY: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub bearer: Option<String>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: &str, url: &str) -> Self {
        let (path, query) = split_url(url);
        Self {
            method: method.to_string(),
            path,
            query,
            bearer: None,
            body: Vec::new(),
        }
    }

    /// Path segments without the leading slash.
    pub fn segments(&self) -> Vec<&str> {
        self.path.trim_start_matches('/').split('/').filter(|s| !s.is_empty()).collect()
    }
}

pub fn split_url(url: &str) -> (String, BTreeMap<String, String>) {
    match url.split_once('?') {
        Some((path, q)) => (path.to_string(), form_urlencoded::parse(q.as_bytes()).into_owned().collect()),
        None => (url.to_string(), BTreeMap::new()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl Reply {
    pub fn json<T: Serialize + ?Sized>(status: u16, value: &T) -> Self {
        Self {
            status,
            body: serde_json::to_vec(value).expect("serializable reply"),
        }
    }

    pub fn raw(status: u16, body: Vec<u8>) -> Self {
        Self { status, body }
    }

    pub fn empty(status: u16) -> Self {
        Self { status, body: Vec::new() }
    }

    /// `{"code": ..., "message": ...}`
    pub fn error(status: u16, code: &str, message: impl AsRef<str>) -> Self {
        Self::json(status, &ErrorBody { code, message: message.as_ref() })
    }
}

pub type Handler = Arc<dyn Fn(&Request) -> Reply + Send + Sync>;

pub struct HttpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServer {
    pub fn start(addr: impl ToSocketAddrs, workers: usize, handler: Handler) -> io::Result<HttpServer> {
        let server = tiny_http::Server::http(addr).map_err(|e| match e.downcast::<io::Error>() {
            Ok(io) => *io,
            Err(other) => io::Error::other(other.to_string()),
        })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let mut handles = Vec::new();
        for i in 0..workers.max(1) {
            let server = server.clone();
            let stop = stop.clone();
            let handler = handler.clone();
            handles.push(
                thread::Builder::new()
                    .name(format!("http-{}-{i}", addr.port()))
                    .spawn(move || worker(&server, &stop, &handler))?,
            );
        }
        Ok(HttpServer {
            addr,
            stop,
            workers: handles,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and joins the workers; the listening socket closes
    /// when the last worker drops its handle.
    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker(server: &tiny_http::Server, stop: &AtomicBool, handler: &Handler) {
    while !stop.load(Ordering::SeqCst) {
        let mut req = match server.recv_timeout(Duration::from_millis(50)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => {
                log::warn!("http accept failed: {e}");
                continue;
            }
        };
        let mut body = Vec::new();
        if let Err(e) = req.as_reader().take(MAX_BODY).read_to_end(&mut body) {
            let _ = respond(req, Reply::error(400, "BadRequest", format!("unreadable body: {e}")));
            continue;
        }
        let bearer = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .and_then(|h| h.value.as_str().strip_prefix("Bearer ").map(str::to_string));
        let (path, query) = split_url(req.url());
        let request = Request {
            method: req.method().as_str().to_string(),
            path,
            query,
            bearer,
            body,
        };
        let reply = handler(&request);
        if let Err(e) = respond(req, reply) {
            log::debug!("http response not delivered: {e}");
        }
    }
}

fn respond(req: tiny_http::Request, reply: Reply) -> io::Result<()> {
    let mut response = tiny_http::Response::from_data(reply.body).with_status_code(reply.status);
    if let Ok(h) = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]) {
        response.add_header(h);
    }
    req.respond(response)
}

/// Blocking client for one base URL.
#[derive(Clone)]
pub struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ClientError(String);

impl Client {
    pub fn new(base: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .max_idle_connections(0)
            .build()
            .into();
        Self {
            agent,
            base: base.into().trim_end_matches('/').to_string(),
            token,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// Performs a request; `Ok` carries any HTTP status. Connections are not
    /// kept alive, so a stopped server fails fast instead of timing out.
    pub fn call(&self, method: &str, path: &str, body: Option<&[u8]>) -> Result<Reply, ClientError> {
        let url = format!("{}{}", self.base, path);
        let auth = self.token.as_ref().map(|t| format!("Bearer {t}"));
        let err = |e: ureq::Error| ClientError(format!("{method} {url}: {e}"));
        let mut response = match (method, body) {
            ("GET" | "DELETE", _) => {
                let mut req = if method == "GET" { self.agent.get(&url) } else { self.agent.delete(&url) };
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.call().map_err(err)?
            }
            (_, body) => {
                let mut req = match method {
                    "PUT" => self.agent.put(&url),
                    "POST" => self.agent.post(&url),
                    other => return Err(ClientError(format!("unsupported method {other}"))),
                };
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.header("Content-Type", "application/json").send(body.unwrap_or(&[])).map_err(err)?
            }
        };
        let status = response.status().as_u16();
        let body = response.body_mut().with_config().limit(MAX_BODY * 8).read_to_vec().map_err(err)?;
        Ok(Reply { status, body })
    }

    pub fn get(&self, path: &str) -> Result<Reply, ClientError> {
        self.call("GET", path, None)
    }

    pub fn post(&self, path: &str, body: &[u8]) -> Result<Reply, ClientError> {
        self.call("POST", path, Some(body))
    }

    pub fn post_json<T: Serialize + ?Sized>(&self, path: &str, value: &T) -> Result<Reply, ClientError> {
        self.post(path, &serde_json::to_vec(value).expect("serializable body"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_parsing_decodes() {
        let r = Request::new("GET", "/api/v1/homes/h1/energy?scope=device%3Aplug1&from=0&to=10");
        assert_eq!(r.path, "/api/v1/homes/h1/energy");
        assert_eq!(r.query["scope"], "device:plug1");
        assert_eq!(r.segments(), vec!["api", "v1", "homes", "h1", "energy"]);
    }

    #[test]
    fn round_trip_over_loopback() {
        let server = HttpServer::start(
            "127.0.0.1:0",
            2,
            Arc::new(|r: &Request| match r.bearer.as_deref() {
                Some("t") => Reply::raw(200, r.body.clone()),
                _ => Reply::error(401, "Unauthorized", "missing token"),
            }),
        )
        .unwrap();
        let base = format!("http://{}", server.local_addr());
        let ok = Client::new(&base, Some("t".into()), Duration::from_secs(5));
        assert_eq!(ok.post("/echo", b"abc").unwrap(), Reply::raw(200, b"abc".to_vec()));
        let anon = Client::new(&base, None, Duration::from_secs(5));
        let r = anon.get("/x").unwrap();
        assert_eq!(r.status, 401);
        assert!(String::from_utf8(r.body).unwrap().contains("\"code\":\"Unauthorized\""));
    }
}
