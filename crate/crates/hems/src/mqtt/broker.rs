//! Embedded broker: username/password auth, `+`/`#` subscriptions, QoS 0/1
//! with retransmission of unacknowledged deliveries and duplicate
//! suppression of re-sent publishes.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufReader, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::codec::{self, CodecError, Connect, Packet, Publish, QoS};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// username → password; empty allows anonymous clients.
    pub credentials: BTreeMap<String, String>,
    pub retry_interval: Duration,
    pub max_retries: u32,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            credentials: BTreeMap::new(),
            retry_interval: Duration::from_millis(500),
            max_retries: 10,
        }
    }
}

/// Called for every accepted client publish before it is acknowledged.
pub type Hook = Arc<dyn Fn(&str, &[u8]) + Send + Sync>;

struct Inflight {
    publish: Publish,
    sent_at: Instant,
    attempts: u32,
}

struct Session {
    client_id: String,
    writer: Arc<Mutex<TcpStream>>,
    filters: Vec<(String, QoS)>,
    next_pid: u16,
    inflight: BTreeMap<u16, Inflight>,
    /// Packet ids of recently received QoS 1 publishes.
    received: VecDeque<u16>,
}

impl Session {
    fn allocate_pid(&mut self) -> u16 {
        loop {
            self.next_pid = self.next_pid.wrapping_add(1).max(1);
            if !self.inflight.contains_key(&self.next_pid) {
                return self.next_pid;
            }
        }
    }
}

struct Shared {
    config: BrokerConfig,
    hook: Option<Hook>,
    sessions: Mutex<BTreeMap<u64, Session>>,
    next_conn: AtomicU64,
    stop: AtomicBool,
}

pub struct Broker {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

const RECENT_IDS: usize = 256;

impl Broker {
    pub fn start(addr: impl ToSocketAddrs, config: BrokerConfig, hook: Option<Hook>) -> io::Result<Broker> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            hook,
            sessions: Mutex::new(BTreeMap::new()),
            next_conn: AtomicU64::new(1),
            stop: AtomicBool::new(false),
        });
        let accept_shared = shared.clone();
        let accept = thread::Builder::new()
            .name("mqtt-accept".into())
            .spawn(move || accept_loop(listener, accept_shared))?;
        Ok(Broker {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Routes a broker-originated message to matching subscribers.
    /// Returns how many sessions it was sent to.
    pub fn publish(&self, topic: &str, payload: &[u8], qos: QoS) -> usize {
        route(&self.shared, topic, payload, qos)
    }

    pub fn connected_clients(&self) -> Vec<String> {
        let sessions = self.shared.sessions.lock().unwrap();
        sessions.values().map(|s| s.client_id.clone()).collect()
    }

    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
        let sessions = std::mem::take(&mut *self.shared.sessions.lock().unwrap());
        for s in sessions.values() {
            let _ = s.writer.lock().unwrap().shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let conn_shared = shared.clone();
                let spawned = thread::Builder::new()
                    .name(format!("mqtt-{peer}"))
                    .spawn(move || {
                        if let Err(e) = serve(stream, &conn_shared) {
                            debug!("mqtt connection {peer} ended: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    warn!("cannot spawn mqtt connection thread: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("mqtt accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn authorized(config: &BrokerConfig, connect: &Connect) -> u8 {
    if config.credentials.is_empty() {
        return codec::ACCEPTED;
    }
    let (Some(user), Some(pass)) = (&connect.username, &connect.password) else {
        return codec::NOT_AUTHORIZED;
    };
    match config.credentials.get(user) {
        Some(expected) if expected.as_bytes() == pass.as_slice() => codec::ACCEPTED,
        _ => codec::BAD_CREDENTIALS,
    }
}

fn write(writer: &Arc<Mutex<TcpStream>>, packet: &Packet) -> io::Result<()> {
    let mut stream = writer.lock().unwrap();
    codec::write_packet(&mut *stream, packet)
}

fn serve(stream: TcpStream, shared: &Arc<Shared>) -> Result<(), CodecError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = BufReader::new(stream);
    let connect = match codec::read_packet(&mut reader)? {
        Some(Packet::Connect(c)) => c,
        _ => return Err(CodecError::Protocol("first packet must be CONNECT")),
    };
    let code = authorized(&shared.config, &connect);
    if code != codec::ACCEPTED {
        write(&writer, &Packet::ConnAck { session_present: false, code })?;
        return Ok(());
    }

    let conn = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    {
        let mut sessions = shared.sessions.lock().unwrap();
        // a reconnecting client id takes over the old session
        let stale: Vec<u64> = sessions
            .iter()
            .filter(|(_, s)| s.client_id == connect.client_id)
            .map(|(k, _)| *k)
            .collect();
        for k in stale {
            if let Some(old) = sessions.remove(&k) {
                let _ = old.writer.lock().unwrap().shutdown(Shutdown::Both);
            }
        }
        sessions.insert(
            conn,
            Session {
                client_id: connect.client_id.clone(),
                writer: writer.clone(),
                filters: Vec::new(),
                next_pid: 0,
                inflight: BTreeMap::new(),
                received: VecDeque::new(),
            },
        );
    }
    // registered first, so the session is visible once the client is connected
    write(&writer, &Packet::ConnAck { session_present: false, code })?;
    reader.get_ref().set_read_timeout(Some(Duration::from_millis(100)))?;
    let result = session_loop(&mut reader, &writer, shared, conn);
    shared.sessions.lock().unwrap().remove(&conn);
    result
}

fn session_loop(
    reader: &mut BufReader<TcpStream>,
    writer: &Arc<Mutex<TcpStream>>,
    shared: &Arc<Shared>,
    conn: u64,
) -> Result<(), CodecError> {
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        retransmit(shared, conn)?;
        // peek so a read timeout never splits a packet
        let ready = !reader.buffer().is_empty()
            || match reader.get_ref().peek(&mut [0u8; 1]) {
                Ok(0) => return Ok(()),
                Ok(_) => true,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => false,
                Err(e) => return Err(e.into()),
            };
        if !ready {
            continue;
        }
        reader.get_ref().set_read_timeout(Some(Duration::from_secs(5)))?;
        let packet = codec::read_packet(reader)?;
        reader.get_ref().set_read_timeout(Some(Duration::from_millis(100)))?;
        let Some(packet) = packet else {
            return Ok(());
        };
        match packet {
            Packet::Publish(p) => {
                let fresh = match (p.qos, p.packet_id) {
                    (QoS::AtLeastOnce, Some(id)) => {
                        let mut sessions = shared.sessions.lock().unwrap();
                        let Some(session) = sessions.get_mut(&conn) else {
                            return Ok(());
                        };
                        let seen = session.received.contains(&id);
                        if !p.dup || !seen {
                            session.received.retain(|x| *x != id);
                            session.received.push_back(id);
                            while session.received.len() > RECENT_IDS {
                                session.received.pop_front();
                            }
                        }
                        !(p.dup && seen)
                    }
                    _ => true,
                };
                if fresh {
                    if let Some(hook) = &shared.hook {
                        hook(&p.topic, &p.payload);
                    }
                    route(shared, &p.topic, &p.payload, p.qos);
                }
                if let Some(id) = p.packet_id {
                    write(writer, &Packet::PubAck(id))?;
                }
            }
            Packet::PubAck(id) => {
                if let Some(s) = shared.sessions.lock().unwrap().get_mut(&conn) {
                    s.inflight.remove(&id);
                }
            }
            Packet::Subscribe { packet_id, filters } => {
                let codes = filters.iter().map(|(_, q)| *q as u8).collect();
                if let Some(s) = shared.sessions.lock().unwrap().get_mut(&conn) {
                    for (f, q) in filters {
                        s.filters.retain(|(existing, _)| existing != &f);
                        s.filters.push((f, q));
                    }
                }
                write(writer, &Packet::SubAck { packet_id, codes })?;
            }
            Packet::PingReq => write(writer, &Packet::PingResp)?,
            Packet::Disconnect => return Ok(()),
            Packet::Connect(_) => return Err(CodecError::Protocol("second CONNECT")),
            _ => return Err(CodecError::Protocol("unexpected packet from client")),
        }
    }
}

fn retransmit(shared: &Shared, conn: u64) -> io::Result<()> {
    let mut sessions = shared.sessions.lock().unwrap();
    let Some(session) = sessions.get_mut(&conn) else {
        return Ok(());
    };
    let now = Instant::now();
    let mut expired = Vec::new();
    for (id, f) in session.inflight.iter_mut() {
        if now.duration_since(f.sent_at) < shared.config.retry_interval {
            continue;
        }
        if f.attempts >= shared.config.max_retries {
            expired.push(*id);
            continue;
        }
        f.attempts += 1;
        f.sent_at = now;
        f.publish.dup = true;
        write(&session.writer, &Packet::Publish(f.publish.clone()))?;
    }
    for id in expired {
        warn!("dropping undelivered message {id} to {}", session.client_id);
        session.inflight.remove(&id);
    }
    Ok(())
}

fn route(shared: &Shared, topic: &str, payload: &[u8], qos: QoS) -> usize {
    let mut sessions = shared.sessions.lock().unwrap();
    let mut delivered = 0;
    for session in sessions.values_mut() {
        let Some(granted) = session
            .filters
            .iter()
            .filter(|(f, _)| codec::topic_matches(f, topic))
            .map(|(_, q)| *q)
            .max_by_key(|q| *q as u8)
        else {
            continue;
        };
        let qos = if granted == QoS::AtLeastOnce && qos == QoS::AtLeastOnce {
            QoS::AtLeastOnce
        } else {
            QoS::AtMostOnce
        };
        let packet_id = (qos == QoS::AtLeastOnce).then(|| session.allocate_pid());
        let publish = Publish {
            dup: false,
            qos,
            retain: false,
            topic: topic.to_string(),
            packet_id,
            payload: payload.to_vec(),
        };
        if write(&session.writer, &Packet::Publish(publish.clone())).is_ok() {
            delivered += 1;
            if let Some(id) = packet_id {
                session.inflight.insert(
                    id,
                    Inflight {
                        publish,
                        sent_at: Instant::now(),
                        attempts: 0,
                    },
                );
            }
        }
    }
    delivered
}
