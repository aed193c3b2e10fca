//! Frame codec.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "A2C2"
//! 4       2     version (1)
//! 6       1     type: 1 HELLO, 2 OBS, 3 CHUNK, 4 ERR, 5 BYE
//! 7       8     request_id
//! 15      4     payload_len
//! 19      ...   payload
//! ```
//!
//! Payloads (all little-endian):
//!
//! * HELLO: `obs_dim u32, act_dim u32, horizon u32, latent_dim u32`
//! * OBS: `dim u32`, then `dim` f32
//! * CHUNK: `horizon u32, act_dim u32, latent_dim u32`, then `horizon·act_dim`
//!   f32 actions and `latent_dim` f32 latent values
//! * ERR: `code u16, len u32`, then `len` bytes of UTF-8
//! * BYE: empty
//!
//! Decode errors carry the byte offset at which the frame stopped making sense;
//! for truncation that is the end of the available data.

use std::io::{Read, Write};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"A2C2";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;
/// Largest payload a peer will accept.
pub const MAX_PAYLOAD: u32 = 16 << 20;

pub mod code {
    pub const BUSY: u16 = 1;
    pub const MALFORMED: u16 = 2;
    pub const SHAPE: u16 = 3;
    pub const ORDER: u16 = 4;
    pub const INTERNAL: u16 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello {
        obs_dim: u32,
        act_dim: u32,
        horizon: u32,
        latent_dim: u32,
    },
    Obs(Vec<f32>),
    Chunk {
        horizon: u32,
        act_dim: u32,
        actions: Vec<f32>,
        latent: Vec<f32>,
    },
    Err {
        code: u16,
        message: String,
    },
    Bye,
}

impl Payload {
    pub fn type_code(&self) -> u8 {
        match self {
            Payload::Hello { .. } => 1,
            Payload::Obs(_) => 2,
            Payload::Chunk { .. } => 3,
            Payload::Err { .. } => 4,
            Payload::Bye => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub request_id: u64,
    pub payload: Payload,
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    match &msg.payload {
        Payload::Hello {
            obs_dim,
            act_dim,
            horizon,
            latent_dim,
        } => {
            for v in [obs_dim, act_dim, horizon, latent_dim] {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::Obs(obs) => {
            body.extend_from_slice(&(obs.len() as u32).to_le_bytes());
            put_f32s(&mut body, obs);
        }
        Payload::Chunk {
            horizon,
            act_dim,
            actions,
            latent,
        } => {
            body.extend_from_slice(&horizon.to_le_bytes());
            body.extend_from_slice(&act_dim.to_le_bytes());
            body.extend_from_slice(&(latent.len() as u32).to_le_bytes());
            put_f32s(&mut body, actions);
            put_f32s(&mut body, latent);
        }
        Payload::Err { code, message } => {
            body.extend_from_slice(&code.to_le_bytes());
            body.extend_from_slice(&(message.len() as u32).to_le_bytes());
            body.extend_from_slice(message.as_bytes());
        }
        Payload::Bye => {}
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(msg.payload.type_code());
    out.extend_from_slice(&msg.request_id.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Protocol {
        offset,
        message: message.into(),
    }
}

/// Cursor over one frame that reports absolute offsets.
struct Cur<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(err(
                self.data.len(),
                format!("truncated {what}: need {n} bytes at offset {}, have {}", self.pos, self.data.len() - self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: u32, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n as usize * 4, what)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

/// Parses the fixed header, returning `(type, request_id, payload_len)`.
pub fn decode_header(h: &[u8]) -> Result<(u8, u64, u32)> {
    let mut c = Cur { data: h, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(err(0, "bad magic"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let ty = c.take(1, "type")?[0];
    if !(1..=5).contains(&ty) {
        return Err(err(6, format!("unknown message type {ty}")));
    }
    let id = u64::from_le_bytes(c.take(8, "request id")?.try_into().unwrap());
    let len = c.u32("payload length")?;
    if len > MAX_PAYLOAD {
        return Err(err(15, format!("payload length {len} exceeds {MAX_PAYLOAD}")));
    }
    Ok((ty, id, len))
}

/// Decodes one frame from the front of `bytes`; returns it with the number of
/// bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
    let (ty, request_id, len) = decode_header(bytes)?;
    let end = HEADER_LEN + len as usize;
    if bytes.len() < end {
        return Err(err(
            bytes.len(),
            format!("truncated payload: frame needs {end} bytes, have {}", bytes.len()),
        ));
    }
    let mut c = Cur {
        data: &bytes[..end],
        pos: HEADER_LEN,
    };
    let payload = match ty {
        1 => Payload::Hello {
            obs_dim: c.u32("hello")?,
            act_dim: c.u32("hello")?,
            horizon: c.u32("hello")?,
            latent_dim: c.u32("hello")?,
        },
        2 => {
            let n = c.u32("observation dim")?;
            Payload::Obs(c.f32s(n, "observation")?)
        }
        3 => {
            let horizon = c.u32("chunk horizon")?;
            let act_dim = c.u32("chunk act dim")?;
            let latent_dim = c.u32("chunk latent dim")?;
            let count = horizon.checked_mul(act_dim).ok_or_else(|| err(HEADER_LEN, "chunk size overflows"))?;
            let actions = c.f32s(count, "chunk actions")?;
            let latent = c.f32s(latent_dim, "chunk latent")?;
            Payload::Chunk {
                horizon,
                act_dim,
                actions,
                latent,
            }
        }
        4 => {
            let code = c.u16("error code")?;
            let n = c.u32("error length")?;
            let at = c.pos;
            let text = c.take(n as usize, "error text")?;
            let message = String::from_utf8(text.to_vec()).map_err(|_| err(at, "error text is not UTF-8"))?;
            Payload::Err { code, message }
        }
        _ => Payload::Bye,
    };
    if c.pos != end {
        return Err(err(c.pos, format!("{} unexpected bytes after the payload", end - c.pos)));
    }
    Ok((Message { request_id, payload }, end))
}

/// Reads exactly one frame. `Ok(None)` on a clean end of stream before any
/// header byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(err(got, "connection closed inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (_, _, len) = decode_header(&head)?;
    let mut frame = head.to_vec();
    frame.resize(HEADER_LEN + len as usize, 0);
    let mut filled = HEADER_LEN;
    while filled < frame.len() {
        match r.read(&mut frame[filled..]) {
            Ok(0) => return Err(err(filled, "connection closed inside a frame payload")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    decode(&frame).map(|(m, _)| Some(m))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}
