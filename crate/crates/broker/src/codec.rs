//! MQTT 3.1.1 packet codec for the broker's subset:
//! CONNECT/CONNACK, PUBLISH, SUBSCRIBE/SUBACK, UNSUBSCRIBE/UNSUBACK,
//! PINGREQ/PINGRESP and DISCONNECT.
//!
//! Decoding is strict: anything outside the subset or not encoded
//! canonically is a [`ProtocolError`], so `encode(decode(bytes)) == bytes`
//! holds for every accepted packet.

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::topic::TopicName;

/// Largest packet (fixed header included) the broker accepts.
pub const MAX_PACKET_BYTES: usize = 64 * 1024;

const CONNECT: u8 = 1;
const CONNACK: u8 = 2;
const PUBLISH: u8 = 3;
const SUBSCRIBE: u8 = 8;
const SUBACK: u8 = 9;
const UNSUBSCRIBE: u8 = 10;
const UNSUBACK: u8 = 11;
const PINGREQ: u8 = 12;
const PINGRESP: u8 = 13;
const DISCONNECT: u8 = 14;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unsupported packet type {0}")]
    UnsupportedType(u8),
    #[error("invalid fixed header flags {flags:#x} for packet type {packet_type}")]
    BadFlags { packet_type: u8, flags: u8 },
    #[error("malformed remaining length")]
    BadLength,
    #[error("packet exceeds {MAX_PACKET_BYTES} bytes")]
    TooLarge,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("invalid UTF-8 string")]
    BadString,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Will {
    pub topic: String,
    pub message: Bytes,
    pub qos: u8,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub protocol_name: String,
    pub protocol_level: u8,
    pub clean_session: bool,
    pub keep_alive: u16,
    pub client_id: String,
    pub will: Option<Will>,
    pub username: Option<String>,
    pub password: Option<Bytes>,
}

impl Connect {
    pub fn new(client_id: impl Into<String>, keep_alive: u16) -> Self {
        Self {
            protocol_name: "MQTT".into(),
            protocol_level: 4,
            clean_session: true,
            keep_alive,
            client_id: client_id.into(),
            will: None,
            username: None,
            password: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: u8,
    pub retain: bool,
    pub topic: String,
    pub packet_id: Option<u16>,
    pub payload: Bytes,
}

impl Publish {
    pub fn qos0(topic: impl Into<String>, payload: impl Into<Bytes>) -> Self {
        Self {
            dup: false,
            qos: 0,
            retain: false,
            topic: topic.into(),
            packet_id: None,
            payload: payload.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    Connack { session_present: bool, code: u8 },
    Publish(Publish),
    Subscribe { packet_id: u16, filters: Vec<(String, u8)> },
    Suback { packet_id: u16, codes: Vec<u8> },
    Unsubscribe { packet_id: u16, filters: Vec<String> },
    Unsuback { packet_id: u16 },
    Pingreq,
    Pingresp,
    Disconnect,
}

pub mod connack {
    pub const ACCEPTED: u8 = 0;
    pub const UNACCEPTABLE_PROTOCOL: u8 = 1;
    pub const IDENTIFIER_REJECTED: u8 = 2;
}

pub const SUBACK_FAILURE: u8 = 0x80;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or(ProtocolError::Malformed("truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.remaining() < n {
            return Err(ProtocolError::Malformed("truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn binary(&mut self) -> Result<&'a [u8], ProtocolError> {
        let n = self.u16()? as usize;
        self.bytes(n)
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(raw).map_err(|_| ProtocolError::BadString)?;
        if s.contains('\0') {
            return Err(ProtocolError::BadString);
        }
        Ok(s.to_string())
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }
}

/// Decodes one packet from the front of `buf`.
///
/// Returns `Ok(None)` when more bytes are needed, otherwise the packet and
/// the number of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<Option<(Packet, usize)>, ProtocolError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let packet_type = first >> 4;
    let flags = first & 0x0f;

    let mut remaining: usize = 0;
    let mut header_len = 1;
    loop {
        let Some(&b) = buf.get(header_len) else {
            return Ok(None);
        };
        let shift = 7 * (header_len - 1);
        remaining |= ((b & 0x7f) as usize) << shift;
        header_len += 1;
        if b & 0x80 == 0 {
            // Non-minimal encodings end in a zero continuation byte.
            if header_len > 2 && b == 0 {
                return Err(ProtocolError::BadLength);
            }
            break;
        }
        if header_len > 4 {
            return Err(ProtocolError::BadLength);
        }
    }
    if header_len + remaining > MAX_PACKET_BYTES {
        return Err(ProtocolError::TooLarge);
    }
    // Validate the header before waiting for a body that may never be legal.
    check_flags(packet_type, flags)?;
    if buf.len() < header_len + remaining {
        return Ok(None);
    }
    let body = &buf[header_len..header_len + remaining];
    let packet = decode_body(packet_type, flags, body)?;
    Ok(Some((packet, header_len + remaining)))
}

fn check_flags(packet_type: u8, flags: u8) -> Result<(), ProtocolError> {
    let expected = match packet_type {
        PUBLISH => return Ok(()),
        SUBSCRIBE | UNSUBSCRIBE => 0b0010,
        CONNECT | CONNACK | SUBACK | UNSUBACK | PINGREQ | PINGRESP | DISCONNECT => 0,
        other => return Err(ProtocolError::UnsupportedType(other)),
    };
    if flags != expected {
        return Err(ProtocolError::BadFlags { packet_type, flags });
    }
    Ok(())
}

fn decode_body(packet_type: u8, flags: u8, body: &[u8]) -> Result<Packet, ProtocolError> {
    let mut r = Reader::new(body);
    let packet = match packet_type {
        CONNECT => Packet::Connect(decode_connect(&mut r)?),
        CONNACK => {
            let ack = r.u8()?;
            if ack & !1 != 0 {
                return Err(ProtocolError::Malformed("connack flags"));
            }
            Packet::Connack {
                session_present: ack == 1,
                code: r.u8()?,
            }
        }
        PUBLISH => {
            let qos = (flags >> 1) & 0b11;
            if qos == 3 {
                return Err(ProtocolError::Malformed("publish qos 3"));
            }
            let dup = flags & 0b1000 != 0;
            if qos == 0 && dup {
                return Err(ProtocolError::Malformed("dup set on qos 0"));
            }
            let topic = r.string()?;
            TopicName::parse(&topic).map_err(|_| ProtocolError::Malformed("publish topic"))?;
            let packet_id = if qos > 0 {
                Some(nonzero_id(r.u16()?)?)
            } else {
                None
            };
            Packet::Publish(Publish {
                dup,
                qos,
                retain: flags & 1 != 0,
                topic,
                packet_id,
                payload: Bytes::copy_from_slice(r.rest()),
            })
        }
        SUBSCRIBE => {
            let packet_id = nonzero_id(r.u16()?)?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = r.string()?;
                let qos = r.u8()?;
                if qos > 2 {
                    return Err(ProtocolError::Malformed("subscribe qos byte"));
                }
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(ProtocolError::Malformed("empty subscribe"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        SUBACK => {
            let packet_id = r.u16()?;
            let codes = r.rest().to_vec();
            if codes.is_empty() || codes.iter().any(|&c| !matches!(c, 0..=2 | SUBACK_FAILURE)) {
                return Err(ProtocolError::Malformed("suback codes"));
            }
            Packet::Suback { packet_id, codes }
        }
        UNSUBSCRIBE => {
            let packet_id = nonzero_id(r.u16()?)?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                filters.push(r.string()?);
            }
            if filters.is_empty() {
                return Err(ProtocolError::Malformed("empty unsubscribe"));
            }
            Packet::Unsubscribe { packet_id, filters }
        }
        UNSUBACK => Packet::Unsuback { packet_id: r.u16()? },
        PINGREQ => Packet::Pingreq,
        PINGRESP => Packet::Pingresp,
        DISCONNECT => Packet::Disconnect,
        other => return Err(ProtocolError::UnsupportedType(other)),
    };
    if r.remaining() != 0 {
        return Err(ProtocolError::Malformed("trailing bytes"));
    }
    Ok(packet)
}

fn nonzero_id(id: u16) -> Result<u16, ProtocolError> {
    if id == 0 {
        Err(ProtocolError::Malformed("zero packet identifier"))
    } else {
        Ok(id)
    }
}

fn decode_connect(r: &mut Reader<'_>) -> Result<Connect, ProtocolError> {
    let protocol_name = r.string()?;
    if protocol_name != "MQTT" && protocol_name != "MQIsdp" {
        return Err(ProtocolError::Malformed("protocol name"));
    }
    let protocol_level = r.u8()?;
    let flags = r.u8()?;
    if flags & 1 != 0 {
        return Err(ProtocolError::Malformed("reserved connect flag"));
    }
    let has_user = flags & 0x80 != 0;
    let has_pass = flags & 0x40 != 0;
    let will_retain = flags & 0x20 != 0;
    let will_qos = (flags >> 3) & 0b11;
    let has_will = flags & 0x04 != 0;
    let clean_session = flags & 0x02 != 0;
    if !has_will && (will_qos != 0 || will_retain) {
        return Err(ProtocolError::Malformed("will flags without will"));
    }
    if will_qos == 3 {
        return Err(ProtocolError::Malformed("will qos 3"));
    }
    if has_pass && !has_user {
        return Err(ProtocolError::Malformed("password without username"));
    }
    let keep_alive = r.u16()?;
    let client_id = r.string()?;
    let will = if has_will {
        let topic = r.string()?;
        let message = Bytes::copy_from_slice(r.binary()?);
        Some(Will {
            topic,
            message,
            qos: will_qos,
            retain: will_retain,
        })
    } else {
        None
    };
    let username = has_user.then(|| r.string()).transpose()?;
    let password = has_pass
        .then(|| r.binary().map(Bytes::copy_from_slice))
        .transpose()?;
    Ok(Connect {
        protocol_name,
        protocol_level,
        clean_session,
        keep_alive,
        client_id,
        will,
        username,
        password,
    })
}

fn put_str(out: &mut BytesMut, s: &[u8]) {
    out.put_u16(s.len() as u16);
    out.put_slice(s);
}

fn put_remaining_length(out: &mut BytesMut, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.put_u8(byte);
        if len == 0 {
            break;
        }
    }
}

/// Encodes a packet into its wire form.
pub fn encode(packet: &Packet) -> Bytes {
    let mut body = BytesMut::new();
    let first: u8 = match packet {
        Packet::Connect(c) => {
            put_str(&mut body, c.protocol_name.as_bytes());
            body.put_u8(c.protocol_level);
            let mut flags = 0u8;
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            if let Some(w) = &c.will {
                flags |= 0x04 | (w.qos << 3);
                if w.retain {
                    flags |= 0x20;
                }
            }
            if c.clean_session {
                flags |= 0x02;
            }
            body.put_u8(flags);
            body.put_u16(c.keep_alive);
            put_str(&mut body, c.client_id.as_bytes());
            if let Some(w) = &c.will {
                put_str(&mut body, w.topic.as_bytes());
                put_str(&mut body, &w.message);
            }
            if let Some(u) = &c.username {
                put_str(&mut body, u.as_bytes());
            }
            if let Some(p) = &c.password {
                put_str(&mut body, p);
            }
            CONNECT << 4
        }
        Packet::Connack { session_present, code } => {
            body.put_u8(u8::from(*session_present));
            body.put_u8(*code);
            CONNACK << 4
        }
        Packet::Publish(p) => {
            put_str(&mut body, p.topic.as_bytes());
            if let Some(id) = p.packet_id {
                body.put_u16(id);
            }
            body.put_slice(&p.payload);
            (PUBLISH << 4) | (u8::from(p.dup) << 3) | (p.qos << 1) | u8::from(p.retain)
        }
        Packet::Subscribe { packet_id, filters } => {
            body.put_u16(*packet_id);
            for (f, qos) in filters {
                put_str(&mut body, f.as_bytes());
                body.put_u8(*qos);
            }
            (SUBSCRIBE << 4) | 0b0010
        }
        Packet::Suback { packet_id, codes } => {
            body.put_u16(*packet_id);
            body.put_slice(codes);
            SUBACK << 4
        }
        Packet::Unsubscribe { packet_id, filters } => {
            body.put_u16(*packet_id);
            for f in filters {
                put_str(&mut body, f.as_bytes());
            }
            (UNSUBSCRIBE << 4) | 0b0010
        }
        Packet::Unsuback { packet_id } => {
            body.put_u16(*packet_id);
            UNSUBACK << 4
        }
        Packet::Pingreq => PINGREQ << 4,
        Packet::Pingresp => PINGRESP << 4,
        Packet::Disconnect => DISCONNECT << 4,
    };
    let mut out = BytesMut::with_capacity(body.len() + 5);
    out.put_u8(first);
    put_remaining_length(&mut out, body.len());
    out.put_slice(&body);
    out.freeze()
}
