//! CoAP message layer (RFC 7252): CON/NON/ACK, piggybacked responses,
//! message-ID deduplication on the server and retransmission on the client.
//! No observe, no block-wise transfer.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const CON: u8 = 0;
pub const NON: u8 = 1;
pub const ACK: u8 = 2;
pub const RST: u8 = 3;

pub const GET: u8 = 0x01;
pub const POST: u8 = 0x02;
pub const PUT: u8 = 0x03;
pub const DELETE: u8 = 0x04;

pub const CHANGED: u8 = 0x44; // 2.04
pub const CONTENT: u8 = 0x45; // 2.05
pub const BAD_REQUEST: u8 = 0x80; // 4.00
pub const NOT_FOUND: u8 = 0x84; // 4.04
pub const METHOD_NOT_ALLOWED: u8 = 0x85; // 4.05
pub const INTERNAL_ERROR: u8 = 0xA0; // 5.00

const OPT_URI_PATH: u16 = 11;
const OPT_CONTENT_FORMAT: u16 = 12;
const OPT_URI_QUERY: u16 = 15;

/// application/json
pub const FORMAT_JSON: u16 = 50;

/// How long a (peer, message id) pair is remembered, per EXCHANGE_LIFETIME.
const EXCHANGE_LIFETIME: Duration = Duration::from_secs(247);
const DEDUP_CAPACITY: usize = 8192;

#[derive(Debug, Error)]
pub enum CoapError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("no acknowledgement after {0} transmissions")]
    Timeout(u32),
    #[error("request reset by peer")]
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub mtype: u8,
    pub code: u8,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// (number, value), sorted by number.
    pub options: Vec<(u16, Vec<u8>)>,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn request(mtype: u8, code: u8, message_id: u16, token: Vec<u8>, path: &str) -> Self {
        let options = path
            .split('/')
            .filter(|s| !s.is_empty())
            .map(|s| (OPT_URI_PATH, s.as_bytes().to_vec()))
            .collect();
        Self {
            mtype,
            code,
            message_id,
            token,
            options,
            payload: Vec::new(),
        }
    }

    pub fn with_query(mut self, query: &str) -> Self {
        self.options.push((OPT_URI_QUERY, query.as_bytes().to_vec()));
        self.options.sort_by_key(|o| o.0);
        self
    }

    pub fn with_payload(mut self, payload: Vec<u8>, format: u16) -> Self {
        let value = if format == 0 { Vec::new() } else { format.to_be_bytes().iter().copied().skip_while(|b| *b == 0).collect() };
        self.options.push((OPT_CONTENT_FORMAT, value));
        self.options.sort_by_key(|o| o.0);
        self.payload = payload;
        self
    }

    /// `/a/b/c` from the Uri-Path options.
    pub fn path(&self) -> String {
        let mut path = String::new();
        for (_, v) in self.options.iter().filter(|o| o.0 == OPT_URI_PATH) {
            path.push('/');
            path.push_str(&String::from_utf8_lossy(v));
        }
        if path.is_empty() {
            path.push('/');
        }
        path
    }

    pub fn queries(&self) -> Vec<String> {
        self.options
            .iter()
            .filter(|o| o.0 == OPT_URI_QUERY)
            .map(|(_, v)| String::from_utf8_lossy(v).into_owned())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0x40 | (self.mtype << 4) | self.token.len() as u8, self.code];
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&self.token);
        let mut last = 0u16;
        for (number, value) in &self.options {
            let delta = number - last;
            last = *number;
            let (d, d_ext) = nibble(delta);
            let (l, l_ext) = nibble(value.len() as u16);
            out.push((d << 4) | l);
            out.extend_from_slice(&d_ext);
            out.extend_from_slice(&l_ext);
            out.extend_from_slice(value);
        }
        if !self.payload.is_empty() {
            out.push(0xFF);
            out.extend_from_slice(&self.payload);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Message, CoapError> {
        if buf.len() < 4 {
            return Err(CoapError::Malformed("shorter than the fixed header"));
        }
        if buf[0] >> 6 != 1 {
            return Err(CoapError::Malformed("unsupported version"));
        }
        let mtype = (buf[0] >> 4) & 0x03;
        let tkl = usize::from(buf[0] & 0x0F);
        if tkl > 8 {
            return Err(CoapError::Malformed("token longer than 8 bytes"));
        }
        let code = buf[1];
        let message_id = u16::from_be_bytes([buf[2], buf[3]]);
        let token = buf.get(4..4 + tkl).ok_or(CoapError::Malformed("truncated token"))?.to_vec();
        let mut pos = 4 + tkl;
        let mut options = Vec::new();
        let mut number = 0u16;
        let mut payload = Vec::new();
        while pos < buf.len() {
            let byte = buf[pos];
            pos += 1;
            if byte == 0xFF {
                if pos == buf.len() {
                    return Err(CoapError::Malformed("payload marker without payload"));
                }
                payload = buf[pos..].to_vec();
                break;
            }
            let delta = read_ext(byte >> 4, buf, &mut pos)?;
            let len = usize::from(read_ext(byte & 0x0F, buf, &mut pos)?);
            number = number.checked_add(delta).ok_or(CoapError::Malformed("option number overflow"))?;
            let value = buf.get(pos..pos + len).ok_or(CoapError::Malformed("truncated option"))?;
            pos += len;
            options.push((number, value.to_vec()));
        }
        Ok(Message {
            mtype,
            code,
            message_id,
            token,
            options,
            payload,
        })
    }
}

fn nibble(v: u16) -> (u8, Vec<u8>) {
    match v {
        0..=12 => (v as u8, Vec::new()),
        13..=268 => (13, vec![(v - 13) as u8]),
        _ => (14, (v - 269).to_be_bytes().to_vec()),
    }
}

fn read_ext(n: u8, buf: &[u8], pos: &mut usize) -> Result<u16, CoapError> {
    match n {
        0..=12 => Ok(u16::from(n)),
        13 => {
            let b = *buf.get(*pos).ok_or(CoapError::Malformed("truncated option"))?;
            *pos += 1;
            Ok(u16::from(b) + 13)
        }
        14 => {
            let b = buf.get(*pos..*pos + 2).ok_or(CoapError::Malformed("truncated option"))?;
            *pos += 2;
            Ok(u16::from_be_bytes([b[0], b[1]]).saturating_add(269))
        }
        _ => Err(CoapError::Malformed("reserved option nibble")),
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: u8,
    pub path: String,
    pub queries: Vec<String>,
    pub payload: Vec<u8>,
    pub peer: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub code: u8,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn new(code: u8, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            code,
            payload: payload.into(),
        }
    }

    pub fn empty(code: u8) -> Self {
        Self::new(code, Vec::new())
    }
}

pub type Handler = Arc<dyn Fn(&Request) -> Response + Send + Sync>;

/// Recently answered exchanges, for duplicate suppression.
struct ExchangeCache {
    entries: BTreeMap<(SocketAddr, u16), (Instant, Option<Vec<u8>>)>,
    order: VecDeque<(SocketAddr, u16)>,
}

impl ExchangeCache {
    fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            order: VecDeque::new(),
        }
    }

    fn get(&mut self, key: &(SocketAddr, u16)) -> Option<&Option<Vec<u8>>> {
        let now = Instant::now();
        while let Some(oldest) = self.order.front().copied() {
            match self.entries.get(&oldest) {
                Some((at, _)) if now.duration_since(*at) < EXCHANGE_LIFETIME => break,
                _ => {
                    self.order.pop_front();
                    self.entries.remove(&oldest);
                }
            }
        }
        self.entries.get(key).map(|(_, r)| r)
    }

    fn insert(&mut self, key: (SocketAddr, u16), response: Option<Vec<u8>>) {
        if self.entries.insert(key, (Instant::now(), response)).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > DEDUP_CAPACITY {
            if let Some(k) = self.order.pop_front() {
                self.entries.remove(&k);
            }
        }
    }
}

pub struct CoapServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl CoapServer {
    pub fn start(addr: impl ToSocketAddrs, handler: Handler) -> io::Result<CoapServer> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name("coap-server".into())
            .spawn(move || serve(socket, handler, flag))?;
        Ok(CoapServer {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CoapServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(socket: UdpSocket, handler: Handler, stop: Arc<AtomicBool>) {
    let mut cache = ExchangeCache::new();
    let mut next_mid: u16 = 0x4000;
    let mut buf = [0u8; 65_535];
    while !stop.load(Ordering::SeqCst) {
        let (n, peer) = match socket.recv_from(&mut buf) {
            Ok(r) => r,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {
                continue
            }
            Err(e) => {
                log::warn!("coap recv failed: {e}");
                continue;
            }
        };
        let msg = match Message::decode(&buf[..n]) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("dropping malformed coap datagram from {peer}: {e}");
                continue;
            }
        };
        if msg.mtype == ACK || msg.mtype == RST || msg.code == 0 {
            if msg.mtype == CON && msg.code == 0 {
                // CoAP ping
                let rst = Message { mtype: RST, code: 0, message_id: msg.message_id, token: Vec::new(), options: Vec::new(), payload: Vec::new() };
                let _ = socket.send_to(&rst.encode(), peer);
            }
            continue;
        }
        let key = (peer, msg.message_id);
        if let Some(cached) = cache.get(&key) {
            if let Some(bytes) = cached {
                let _ = socket.send_to(bytes, peer);
            }
            continue;
        }
        let request = Request {
            method: msg.code,
            path: msg.path(),
            queries: msg.queries(),
            payload: msg.payload.clone(),
            peer,
        };
        let response = handler(&request);
        let (mtype, message_id) = if msg.mtype == CON {
            (ACK, msg.message_id)
        } else {
            next_mid = next_mid.wrapping_add(1);
            (NON, next_mid)
        };
        let mut reply = Message {
            mtype,
            code: response.code,
            message_id,
            token: msg.token.clone(),
            options: Vec::new(),
            payload: Vec::new(),
        };
        if !response.payload.is_empty() {
            reply = reply.with_payload(response.payload, FORMAT_JSON);
        }
        let bytes = reply.encode();
        let _ = socket.send_to(&bytes, peer);
        cache.insert(key, (msg.mtype == CON).then_some(bytes));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClientConfig {
    pub ack_timeout: Duration,
    pub max_retransmit: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            ack_timeout: Duration::from_millis(500),
            max_retransmit: 4,
        }
    }
}

/// Confirmable request/response client bound to one server.
pub struct CoapClient {
    socket: UdpSocket,
    server: SocketAddr,
    config: ClientConfig,
    state: Mutex<(u16, u64)>,
}

impl CoapClient {
    pub fn new(server: SocketAddr, config: ClientConfig) -> io::Result<CoapClient> {
        let local: SocketAddr = if server.is_ipv4() { "127.0.0.1:0" } else { "[::1]:0" }.parse().expect("literal address");
        let socket = UdpSocket::bind(local)?;
        Ok(CoapClient {
            socket,
            server,
            config,
            state: Mutex::new((1, 1)),
        })
    }

    pub fn server(&self) -> SocketAddr {
        self.server
    }

    /// Sends a CON request and waits for the piggybacked response, doubling
    /// the timeout on every retransmission.
    pub fn request(&self, method: u8, path: &str, query: Option<&str>, payload: &[u8]) -> Result<Response, CoapError> {
        let mut state = self.state.lock().unwrap();
        let (mid, token) = *state;
        *state = (mid.wrapping_add(1), token.wrapping_add(1));
        let token = token.to_be_bytes().to_vec();
        let mut msg = Message::request(CON, method, mid, token.clone(), path);
        if let Some(q) = query {
            msg = msg.with_query(q);
        }
        if !payload.is_empty() {
            msg = msg.with_payload(payload.to_vec(), FORMAT_JSON);
        }
        let bytes = msg.encode();
        let mut timeout = self.config.ack_timeout;
        let mut buf = [0u8; 65_535];
        for _ in 0..=self.config.max_retransmit {
            self.socket.send_to(&bytes, self.server)?;
            let deadline = Instant::now() + timeout;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                self.socket.set_read_timeout(Some(left))?;
                let n = match self.socket.recv_from(&mut buf) {
                    Ok((n, from)) if from == self.server => n,
                    Ok(_) => continue,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => break,
                    Err(e) => return Err(e.into()),
                };
                let Ok(reply) = Message::decode(&buf[..n]) else { continue };
                if reply.mtype == RST && reply.message_id == mid {
                    return Err(CoapError::Reset);
                }
                if reply.mtype == ACK && reply.message_id == mid && reply.token == token {
                    return Ok(Response {
                        code: reply.code,
                        payload: reply.payload,
                    });
                }
            }
            timeout *= 2;
        }
        Err(CoapError::Timeout(self.config.max_retransmit + 1))
    }
}
