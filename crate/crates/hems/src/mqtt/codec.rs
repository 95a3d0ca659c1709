//! MQTT 3.1.1 packet encoding for the subset used here.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed remaining length")]
    BadLength,
    #[error("packet truncated")]
    Truncated,
    #[error("invalid utf-8 string")]
    BadString,
    #[error("unsupported packet type {0}")]
    Unsupported(u8),
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    fn from_bits(bits: u8) -> Result<Self, CodecError> {
        match bits {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            _ => Err(CodecError::Protocol("QoS 2 is not supported")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
    pub keep_alive: u16,
    pub clean_session: bool,
}

/// CONNACK return codes.
pub const ACCEPTED: u8 = 0;
pub const BAD_CREDENTIALS: u8 = 4;
pub const NOT_AUTHORIZED: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck { session_present: bool, code: u8 },
    Publish(Publish),
    PubAck(u16),
    Subscribe { packet_id: u16, filters: Vec<(String, QoS)> },
    SubAck { packet_id: u16, codes: Vec<u8> },
    PingReq,
    PingResp,
    Disconnect,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_bytes(buf, s.as_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u16).to_be_bytes());
    buf.extend_from_slice(b);
}

fn put_length(buf: &mut Vec<u8>, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        buf.push(byte);
        if len == 0 {
            break;
        }
    }
}

pub fn encode(packet: &Packet) -> Vec<u8> {
    let (header, body) = match packet {
        Packet::Connect(c) => {
            let mut body = Vec::new();
            put_str(&mut body, "MQTT");
            body.push(4);
            let mut flags = 0u8;
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            if c.clean_session {
                flags |= 0x02;
            }
            body.push(flags);
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_str(&mut body, &c.client_id);
            if let Some(u) = &c.username {
                put_str(&mut body, u);
            }
            if let Some(p) = &c.password {
                put_bytes(&mut body, p);
            }
            (0x10, body)
        }
        Packet::ConnAck { session_present, code } => (0x20, vec![u8::from(*session_present), *code]),
        Packet::Publish(p) => {
            let mut body = Vec::new();
            put_str(&mut body, &p.topic);
            if let Some(id) = p.packet_id {
                body.extend_from_slice(&id.to_be_bytes());
            }
            body.extend_from_slice(&p.payload);
            let header = 0x30 | (u8::from(p.dup) << 3) | ((p.qos as u8) << 1) | u8::from(p.retain);
            (header, body)
        }
        Packet::PubAck(id) => (0x40, id.to_be_bytes().to_vec()),
        Packet::Subscribe { packet_id, filters } => {
            let mut body = packet_id.to_be_bytes().to_vec();
            for (f, q) in filters {
                put_str(&mut body, f);
                body.push(*q as u8);
            }
            (0x82, body)
        }
        Packet::SubAck { packet_id, codes } => {
            let mut body = packet_id.to_be_bytes().to_vec();
            body.extend_from_slice(codes);
            (0x90, body)
        }
        Packet::PingReq => (0xC0, Vec::new()),
        Packet::PingResp => (0xD0, Vec::new()),
        Packet::Disconnect => (0xE0, Vec::new()),
    };
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(header);
    put_length(&mut out, body.len());
    out.extend_from_slice(&body);
    out
}

pub fn write_packet(w: &mut impl Write, packet: &Packet) -> io::Result<()> {
    w.write_all(&encode(packet))?;
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self.buf.get(self.pos).ok_or(CodecError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u16()? as usize;
        let end = self.pos + len;
        let slice = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CodecError::BadString)
    }

    fn rest(&mut self) -> &'a [u8] {
        let rest = &self.buf[self.pos..];
        self.pos = self.buf.len();
        rest
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

pub fn decode(header: u8, body: &[u8]) -> Result<Packet, CodecError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let packet = match header >> 4 {
        1 => {
            if c.string()? != "MQTT" {
                return Err(CodecError::Protocol("protocol name must be MQTT"));
            }
            if c.u8()? != 4 {
                return Err(CodecError::Protocol("protocol level must be 4"));
            }
            let flags = c.u8()?;
            let keep_alive = c.u16()?;
            let client_id = c.string()?;
            if flags & 0x04 != 0 {
                return Err(CodecError::Protocol("will messages are not supported"));
            }
            let username = if flags & 0x80 != 0 { Some(c.string()?) } else { None };
            let password = if flags & 0x40 != 0 { Some(c.bytes()?.to_vec()) } else { None };
            Packet::Connect(Connect {
                client_id,
                username,
                password,
                keep_alive,
                clean_session: flags & 0x02 != 0,
            })
        }
        2 => Packet::ConnAck {
            session_present: c.u8()? & 1 == 1,
            code: c.u8()?,
        },
        3 => {
            let qos = QoS::from_bits((header >> 1) & 0x03)?;
            let topic = c.string()?;
            let packet_id = if qos == QoS::AtMostOnce { None } else { Some(c.u16()?) };
            Packet::Publish(Publish {
                dup: header & 0x08 != 0,
                qos,
                retain: header & 0x01 != 0,
                topic,
                packet_id,
                payload: c.rest().to_vec(),
            })
        }
        4 => Packet::PubAck(c.u16()?),
        8 => {
            let packet_id = c.u16()?;
            let mut filters = Vec::new();
            while !c.done() {
                let f = c.string()?;
                filters.push((f, QoS::from_bits(c.u8()? & 0x03).unwrap_or(QoS::AtLeastOnce)));
            }
            if filters.is_empty() {
                return Err(CodecError::Protocol("SUBSCRIBE without filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            let packet_id = c.u16()?;
            Packet::SubAck {
                packet_id,
                codes: c.rest().to_vec(),
            }
        }
        12 => Packet::PingReq,
        13 => Packet::PingResp,
        14 => Packet::Disconnect,
        other => return Err(CodecError::Unsupported(other)),
    };
    Ok(packet)
}

/// Reads one packet. `Ok(None)` on a clean end of stream.
pub fn read_packet(r: &mut impl Read) -> Result<Option<Packet>, CodecError> {
    let mut header = [0u8; 1];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let mut len = 0usize;
    let mut shift = 0;
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        len |= usize::from(b[0] & 0x7F) << shift;
        if b[0] & 0x80 == 0 {
            break;
        }
        shift += 7;
        if shift > 21 {
            return Err(CodecError::BadLength);
        }
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode(header[0], &body).map(Some)
}

/// Topic filter match with single-level `+` and trailing `#` wildcards.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(p: Packet) {
        let bytes = encode(&p);
        let decoded = read_packet(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(decoded, p);
    }

    #[test]
    fn packets_round_trip() {
        round_trip(Packet::Connect(Connect {
            client_id: "dev-1".into(),
            username: Some("u".into()),
            password: Some(b"secret".to_vec()),
            keep_alive: 30,
            clean_session: true,
        }));
        round_trip(Packet::ConnAck { session_present: false, code: BAD_CREDENTIALS });
        round_trip(Packet::Publish(Publish {
            dup: true,
            qos: QoS::AtLeastOnce,
            retain: false,
            topic: "hems/h1/plug/tel/power".into(),
            packet_id: Some(7),
            payload: vec![0u8; 300],
        }));
        round_trip(Packet::Subscribe {
            packet_id: 1,
            filters: vec![("hems/h1/+/tel/+".into(), QoS::AtLeastOnce)],
        });
        round_trip(Packet::SubAck { packet_id: 1, codes: vec![1] });
        round_trip(Packet::PubAck(65535));
        round_trip(Packet::PingReq);
        round_trip(Packet::Disconnect);
    }

    #[test]
    fn remaining_length_boundaries() {
        for len in [0usize, 127, 128, 16_383, 16_384, 200_000] {
            let mut buf = Vec::new();
            put_length(&mut buf, len);
            let mut decoded = 0usize;
            for (i, b) in buf.iter().enumerate() {
                decoded |= usize::from(b & 0x7F) << (7 * i);
            }
            assert_eq!(decoded, len);
        }
    }

    #[test]
    fn wildcard_matching() {
        assert!(topic_matches("hems/h1/+/tel/+", "hems/h1/plug/tel/power"));
        assert!(!topic_matches("hems/h1/+/tel/+", "hems/h1/plug/cmd"));
        assert!(!topic_matches("hems/h1/+/tel/+", "hems/h1/plug/tel/power/x"));
        assert!(topic_matches("hems/#", "hems/h1/plug/cmd"));
    }

    #[test]
    fn qos2_is_rejected() {
        assert!(decode(0x34, &[0, 1, b'a', 0, 1]).is_err());
    }
}
