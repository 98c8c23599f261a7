//! Binary wire format for query requests and compressed answers.
//!
//! All integers are little-endian. A request frame is:
//! magic `PCQ1`, u32 (p mod 2^32), u16 N, u16 K, u16 M, u64 L, u32 query
//! count, then each query as u16 term count followed by terms
//! (u16 message, u64 position, u8 sign with 0 = plus, 1 = minus).
//! A response frame is: magic `PCA1`, u32 value count, then u64 values.
//!
//! Positions are absolute into the server's store, so multi-round retrievals
//! simply offset them; `l` carries the store length for validation.

use std::io::{Read, Write};

use thiserror::Error;

use crate::planner::WireQuery;

pub const REQUEST_MAGIC: &[u8; 4] = b"PCQ1";
pub const RESPONSE_MAGIC: &[u8; 4] = b"PCA1";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("version mismatch: got magic {got:?}")]
    VersionMismatch { got: [u8; 4] },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One server's share of a retrieval round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub p_low: u32,
    pub n: u16,
    pub k: u16,
    pub m: u16,
    pub l: u64,
    pub queries: Vec<WireQuery>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub values: Vec<u64>,
}

pub fn write_request<W: Write>(w: &mut W, req: &Request) -> Result<(), WireError> {
    w.write_all(REQUEST_MAGIC)?;
    w.write_all(&req.p_low.to_le_bytes())?;
    w.write_all(&req.n.to_le_bytes())?;
    w.write_all(&req.k.to_le_bytes())?;
    w.write_all(&req.m.to_le_bytes())?;
    w.write_all(&req.l.to_le_bytes())?;
    let count = u32::try_from(req.queries.len())
        .map_err(|_| WireError::MalformedFrame("too many queries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for q in &req.queries {
        let terms = u16::try_from(q.terms.len())
            .map_err(|_| WireError::MalformedFrame("too many terms".into()))?;
        w.write_all(&terms.to_le_bytes())?;
        for &(msg, pos, sign) in &q.terms {
            w.write_all(&msg.to_le_bytes())?;
            w.write_all(&pos.to_le_bytes())?;
            w.write_all(&[u8::from(sign < 0)])?;
        }
    }
    Ok(())
}

pub fn read_request<R: Read>(r: &mut R) -> Result<Request, WireError> {
    let magic = read_array::<4, R>(r)?;
    read_request_after_magic(r, magic)
}

/// Like [`read_request`], but a clean end-of-stream before any byte of a new
/// frame yields `None` instead of an error — the session is simply over.
pub fn read_request_opt<R: Read>(r: &mut R) -> Result<Option<Request>, WireError> {
    let mut first = [0u8; 1];
    loop {
        match r.read(&mut first) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let rest = read_array::<3, R>(r)?;
    let magic = [first[0], rest[0], rest[1], rest[2]];
    read_request_after_magic(r, magic).map(Some)
}

fn read_request_after_magic<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<Request, WireError> {
    if &magic != REQUEST_MAGIC {
        return Err(WireError::VersionMismatch { got: magic });
    }
    let p_low = u32::from_le_bytes(read_array(r)?);
    let n = u16::from_le_bytes(read_array(r)?);
    let k = u16::from_le_bytes(read_array(r)?);
    let m = u16::from_le_bytes(read_array(r)?);
    let l = u64::from_le_bytes(read_array(r)?);
    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut queries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let terms = u16::from_le_bytes(read_array(r)?) as usize;
        let mut q = Vec::with_capacity(terms);
        for _ in 0..terms {
            let msg = u16::from_le_bytes(read_array(r)?);
            let pos = u64::from_le_bytes(read_array(r)?);
            let sign_byte = read_array::<1, R>(r)?[0];
            let sign = match sign_byte {
                0 => 1i8,
                1 => -1i8,
                other => {
                    return Err(WireError::MalformedFrame(format!("bad sign byte {other}")))
                }
            };
            q.push((msg, pos, sign));
        }
        queries.push(WireQuery { terms: q });
    }
    Ok(Request {
        p_low,
        n,
        k,
        m,
        l,
        queries,
    })
}

pub fn write_response<W: Write>(w: &mut W, resp: &Response) -> Result<(), WireError> {
    w.write_all(RESPONSE_MAGIC)?;
    let count = u32::try_from(resp.values.len())
        .map_err(|_| WireError::MalformedFrame("too many values".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for v in &resp.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_response<R: Read>(r: &mut R) -> Result<Response, WireError> {
    let magic = read_array::<4, R>(r)?;
    if &magic != RESPONSE_MAGIC {
        return Err(WireError::VersionMismatch { got: magic });
    }
    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut values = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        values.push(u64::from_le_bytes(read_array(r)?));
    }
    Ok(Response { values })
}

fn read_array<const S: usize, R: Read>(r: &mut R) -> Result<[u8; S], WireError> {
    let mut buf = [0u8; S];
    r.read_exact(&mut buf)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                WireError::MalformedFrame("truncated frame".into())
            }
            _ => WireError::Io(e),
        })?;
    Ok(buf)
}

/// Convenience byte-buffer wrappers.
pub fn request_to_bytes(req: &Request) -> Vec<u8> {
    let mut buf = Vec::new();
    write_request(&mut buf, req).expect("vec writes are infallible");
    buf
}

pub fn request_from_bytes(bytes: &[u8]) -> Result<Request, WireError> {
    let mut cursor = bytes;
    read_request(&mut cursor)
}

pub fn response_to_bytes(resp: &Response) -> Vec<u8> {
    let mut buf = Vec::new();
    write_response(&mut buf, resp).expect("vec writes are infallible");
    buf
}

pub fn response_from_bytes(bytes: &[u8]) -> Result<Response, WireError> {
    let mut cursor = bytes;
    read_response(&mut cursor)
}
