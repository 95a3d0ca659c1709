//! Blocking MQTT client used by simulated devices and tests.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufReader};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use super::codec::{self, CodecError, Connect, Packet, Publish, QoS};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("connection refused by broker (code {0})")]
    Refused(u8),
    #[error("no acknowledgement after {0} attempts")]
    Timeout(u32),
    #[error("connection closed")]
    Closed,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub username: Option<String>,
    pub password: Option<String>,
    pub ack_timeout: Duration,
    pub max_retries: u32,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            username: None,
            password: None,
            ack_timeout: Duration::from_millis(500),
            max_retries: 6,
        }
    }

    pub fn credentials(mut self, user: impl Into<String>, password: impl Into<String>) -> Self {
        self.username = Some(user.into());
        self.password = Some(password.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub payload: Vec<u8>,
}

type Waiters = Arc<Mutex<BTreeMap<u16, Sender<()>>>>;

pub struct Client {
    options: ClientOptions,
    writer: Arc<Mutex<TcpStream>>,
    waiters: Waiters,
    next_pid: Mutex<u16>,
    messages: Receiver<Message>,
    closed: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, options: ClientOptions) -> Result<Client, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let mut writer = stream.try_clone()?;
        codec::write_packet(
            &mut writer,
            &Packet::Connect(Connect {
                client_id: options.client_id.clone(),
                username: options.username.clone(),
                password: options.password.as_ref().map(|p| p.as_bytes().to_vec()),
                keep_alive: 0,
                clean_session: true,
            }),
        )?;
        let mut reader = BufReader::new(stream);
        match codec::read_packet(&mut reader)? {
            Some(Packet::ConnAck { code: codec::ACCEPTED, .. }) => {}
            Some(Packet::ConnAck { code, .. }) => return Err(ClientError::Refused(code)),
            _ => return Err(ClientError::Closed),
        }
        reader.get_ref().set_read_timeout(None)?;

        let writer = Arc::new(Mutex::new(writer));
        let waiters: Waiters = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        let (tx, messages) = unbounded();
        let handle = {
            let writer = writer.clone();
            let waiters = waiters.clone();
            let closed = closed.clone();
            thread::Builder::new()
                .name(format!("mqtt-client-{}", options.client_id))
                .spawn(move || {
                    read_loop(reader, &writer, &waiters, &tx);
                    closed.store(true, Ordering::SeqCst);
                    // wake any publisher waiting for an ack
                    waiters.lock().unwrap().clear();
                })?
        };
        Ok(Client {
            options,
            writer,
            waiters,
            next_pid: Mutex::new(0),
            messages,
            closed,
            reader: Some(handle),
        })
    }

    pub fn is_connected(&self) -> bool {
        !self.closed.load(Ordering::SeqCst)
    }

    fn pid(&self) -> u16 {
        let mut next = self.next_pid.lock().unwrap();
        *next = next.wrapping_add(1).max(1);
        *next
    }

    fn send(&self, packet: &Packet) -> Result<(), ClientError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(ClientError::Closed);
        }
        let mut stream = self.writer.lock().unwrap();
        codec::write_packet(&mut *stream, packet).map_err(ClientError::from)
    }

    /// Sends `packet` (built for a given attempt) until `id` is acknowledged.
    fn exchange(&self, id: u16, packet: impl Fn(bool) -> Packet) -> Result<(), ClientError> {
        let (tx, rx) = bounded(1);
        self.waiters.lock().unwrap().insert(id, tx);
        let mut result = Err(ClientError::Timeout(self.options.max_retries + 1));
        for attempt in 0..=self.options.max_retries {
            if let Err(e) = self.send(&packet(attempt > 0)) {
                result = Err(e);
                break;
            }
            match rx.recv_timeout(self.options.ack_timeout) {
                Ok(()) => {
                    result = Ok(());
                    break;
                }
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    result = Err(ClientError::Closed);
                    break;
                }
            }
        }
        self.waiters.lock().unwrap().remove(&id);
        result
    }

    pub fn subscribe(&self, filter: &str, qos: QoS) -> Result<(), ClientError> {
        let id = self.pid();
        self.exchange(id, |_| Packet::Subscribe {
            packet_id: id,
            filters: vec![(filter.to_string(), qos)],
        })
    }

    /// Publishes; with QoS 1 blocks until the broker acknowledges, re-sending
    /// with the DUP flag on timeout.
    pub fn publish(&self, topic: &str, payload: &[u8], qos: QoS) -> Result<(), ClientError> {
        if qos == QoS::AtMostOnce {
            return self.send(&Packet::Publish(Publish {
                dup: false,
                qos,
                retain: false,
                topic: topic.to_string(),
                packet_id: None,
                payload: payload.to_vec(),
            }));
        }
        let id = self.pid();
        self.exchange(id, |dup| {
            Packet::Publish(Publish {
                dup,
                qos,
                retain: false,
                topic: topic.to_string(),
                packet_id: Some(id),
                payload: payload.to_vec(),
            })
        })
    }

    /// Messages delivered on subscribed topics.
    pub fn messages(&self) -> &Receiver<Message> {
        &self.messages
    }

    pub fn disconnect(mut self) {
        let _ = self.send(&Packet::Disconnect);
        self.close();
    }

    fn close(&mut self) {
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_loop(mut reader: BufReader<TcpStream>, writer: &Arc<Mutex<TcpStream>>, waiters: &Waiters, tx: &Sender<Message>) {
    let mut recent: VecDeque<u16> = VecDeque::new();
    loop {
        let packet = match codec::read_packet(&mut reader) {
            Ok(Some(p)) => p,
            _ => return,
        };
        match packet {
            Packet::PubAck(id) | Packet::SubAck { packet_id: id, .. } => {
                if let Some(w) = waiters.lock().unwrap().get(&id) {
                    let _ = w.try_send(());
                }
            }
            Packet::Publish(p) => {
                let duplicate = match p.packet_id {
                    Some(id) => {
                        let seen = recent.contains(&id);
                        if !p.dup || !seen {
                            recent.retain(|x| *x != id);
                            recent.push_back(id);
                            if recent.len() > 256 {
                                recent.pop_front();
                            }
                        }
                        p.dup && seen
                    }
                    None => false,
                };
                if let Some(id) = p.packet_id {
                    let mut w = writer.lock().unwrap();
                    if codec::write_packet(&mut *w, &Packet::PubAck(id)).is_err() {
                        return;
                    }
                }
                if !duplicate {
                    let _ = tx.send(Message {
                        topic: p.topic,
                        payload: p.payload,
                    });
                }
            }
            Packet::PingResp => {}
            _ => return,
        }
    }
}
