//! Binary container shared by datasets and checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` header length, a UTF-8 JSON
//! header, then `num_records × record_len` little-endian floats of the
//! header's `dtype` (`f32` or `f64`). The payload length must match the
//! header exactly; anything shorter is reported as truncation.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"BCMQBIN\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
        }
    }
}

/// Decoded container: the caller-defined header fields and the raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub record_len: usize,
    pub num_records: usize,
    pub meta: Map<String, Value>,
    pub payload: Payload,
}

pub fn encode(kind: &str, record_len: usize, meta: &Map<String, Value>, payload: &Payload) -> Result<Vec<u8>> {
    if record_len == 0 || payload.len() % record_len != 0 {
        return Err(Error::InvalidInput(format!(
            "payload of {} values is not a whole number of {record_len}-value records",
            payload.len()
        )));
    }
    let mut header = Map::new();
    header.insert("schema_version".into(), SCHEMA_VERSION.into());
    header.insert("kind".into(), kind.into());
    header.insert("dtype".into(), payload.dtype().name().into());
    header.insert("record_len".into(), record_len.into());
    header.insert("num_records".into(), (payload.len() / record_len).into());
    header.insert("meta".into(), Value::Object(meta.clone()));
    let header = serde_json::to_vec(&Value::Object(header))?;

    let mut out = Vec::with_capacity(12 + header.len() + payload.len() * payload.dtype().width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn write(path: &Path, kind: &str, record_len: usize, meta: &Map<String, Value>, payload: &Payload) -> Result<()> {
    let bytes = encode(kind, record_len, meta, payload)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read(path: &Path, expected_kind: &str) -> Result<Container> {
    let bytes = fs::read(path)?;
    decode(&bytes, expected_kind).map_err(|kind| Error::format(path, kind))
}

fn corrupt(msg: impl Into<String>) -> FormatError {
    FormatError::CorruptHeader(msg.into())
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> std::result::Result<Container, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(FormatError::Truncated { expected: 4, found: rest.len() });
    }
    let header_len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(FormatError::Truncated { expected: header_len, found: rest.len() });
    }
    let header: Value =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| corrupt(format!("header is not JSON: {e}")))?;
    let header = header.as_object().ok_or_else(|| corrupt("header is not an object"))?;
    let get_u64 = |key: &str| {
        header
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| corrupt(format!("missing or non-integer `{key}`")))
    };
    let version = get_u64("schema_version")? as u32;
    if version != SCHEMA_VERSION {
        return Err(FormatError::SchemaVersion { found: version, expected: SCHEMA_VERSION });
    }
    let kind = header
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| corrupt("missing `kind`"))?;
    if kind != expected_kind {
        return Err(corrupt(format!("expected a {expected_kind} file, found {kind}")));
    }
    let dtype = match header.get("dtype").and_then(Value::as_str) {
        Some("f32") => Dtype::F32,
        Some("f64") => Dtype::F64,
        other => return Err(corrupt(format!("unknown dtype {other:?}"))),
    };
    let record_len = get_u64("record_len")? as usize;
    let num_records = get_u64("num_records")? as usize;
    if record_len == 0 {
        return Err(corrupt("record_len is zero"));
    }
    let meta = match header.get("meta") {
        Some(Value::Object(m)) => m.clone(),
        None => Map::new(),
        Some(_) => return Err(corrupt("`meta` is not an object")),
    };

    let body = &rest[header_len..];
    let expected = record_len
        .checked_mul(num_records)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| corrupt("payload size overflows"))?;
    if body.len() < expected {
        return Err(FormatError::Truncated { expected, found: body.len() });
    }
    if body.len() > expected {
        return Err(FormatError::TrailingBytes(body.len() - expected));
    }
    let payload = match dtype {
        Dtype::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => Payload::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        ),
    };
    Ok(Container { kind: kind.to_string(), record_len, num_records, meta, payload })
}
