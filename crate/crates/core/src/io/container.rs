//! Raw tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MOESHEAR"            8 bytes magic
//! header_len            u64
//! header                UTF-8 JSON, header_len bytes
//! zero padding          up to the next 64-byte boundary
//! payload               f32 tensors, row-major, each at a 64-byte aligned offset
//! ```
//!
//! The JSON header carries arbitrary top-level fields plus a `tensors`
//! directory mapping each name to `{dtype, shape, offset}`, where `offset`
//! is relative to the payload start.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOESHEAR";
pub const ALIGN: usize = 64;
const TENSORS_KEY: &str = "tensors";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn numel(shape: &[usize]) -> usize {
        shape.iter().product()
    }
}

/// Header fields plus tensors in payload order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub fields: Map<String, Value>,
    pub tensors: Vec<(String, RawTensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn field_usize(&self, key: &str) -> Result<usize> {
        self.fields
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("header field `{key}` missing or not an integer")))
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut directory = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in &c.tensors {
        if t.data.len() != RawTensor::numel(&t.shape) {
            return Err(Error::Tensor {
                tensor: name.clone(),
                reason: format!("shape {:?} does not match {} elements", t.shape, t.data.len()),
            });
        }
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset: offset as u64,
        };
        if directory.insert(name.clone(), entry).is_some() {
            return Err(Error::Tensor {
                tensor: name.clone(),
                reason: "duplicate tensor name".into(),
            });
        }
        offset = align_up(offset + t.data.len() * 4);
    }
    let mut header = c.fields.clone();
    header.insert(TENSORS_KEY.into(), serde_json::to_value(&directory)?);
    let header_bytes = serde_json::to_vec(&Value::Object(header))?;

    let payload_start = align_up(MAGIC.len() + 8 + header_bytes.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.resize(payload_start, 0);
    for (name, t) in &c.tensors {
        let at = payload_start + directory[name].offset as usize;
        out.resize(at, 0);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    // trailing tensors end on an aligned boundary too
    out.resize(align_up(out.len()), 0);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing MOESHEAR magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Value = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let Value::Object(mut fields) = header else {
        return Err(Error::Format("header is not a JSON object".into()));
    };
    let directory: BTreeMap<String, TensorEntry> = match fields.remove(TENSORS_KEY) {
        Some(v) => serde_json::from_value(v)
            .map_err(|e| Error::Format(format!("tensor directory malformed: {e}")))?,
        None => return Err(Error::Format("header has no tensor directory".into())),
    };

    let payload_start = align_up(header_end);
    let payload = bytes.get(payload_start..).unwrap_or(&[]);

    let mut entries: Vec<(&String, &TensorEntry)> = directory.iter().collect();
    entries.sort_by_key(|(name, e)| (e.offset, (*name).clone()));
    for (name, e) in &entries {
        if e.dtype != "f32" {
            return Err(Error::Tensor {
                tensor: (*name).clone(),
                reason: format!("unknown dtype `{}`", e.dtype),
            });
        }
        if !(e.offset as usize).is_multiple_of(ALIGN) {
            return Err(Error::Tensor {
                tensor: (*name).clone(),
                reason: format!("offset {} is not {ALIGN}-byte aligned", e.offset),
            });
        }
    }
    for pair in entries.windows(2) {
        let (a, ea) = pair[0];
        let (b, eb) = pair[1];
        let end_a = ea.offset as usize + RawTensor::numel(&ea.shape) * 4;
        if end_a > eb.offset as usize {
            return Err(Error::Tensor {
                tensor: b.clone(),
                reason: format!("overlaps tensor `{a}` (ends at {end_a}, starts at {})", eb.offset),
            });
        }
    }

    let mut tensors = Vec::with_capacity(entries.len());
    for (name, e) in entries {
        let start = e.offset as usize;
        let numel = RawTensor::numel(&e.shape);
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Tensor {
                tensor: name.clone(),
                reason: format!(
                    "payload truncated: needs bytes {start}..{end}, only {} available",
                    payload.len()
                ),
            });
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((
            name.clone(),
            RawTensor {
                shape: e.shape.clone(),
                data,
            },
        ));
    }
    Ok(Container { fields, tensors })
}

pub fn write(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    std::fs::write(path, encode(c)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Container> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut fields = Map::new();
        fields.insert("kind".into(), Value::from("test"));
        Container {
            fields,
            tensors: vec![
                (
                    "a".into(),
                    RawTensor {
                        shape: vec![2, 3],
                        data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0],
                    },
                ),
                (
                    "b".into(),
                    RawTensor {
                        shape: vec![1],
                        data: vec![7.25],
                    },
                ),
            ],
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"MOESHEAR");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = align_up(16 + hlen);
        assert!(bytes[16 + hlen..payload_start].iter().all(|&b| b == 0));
        assert_eq!(&bytes[payload_start..payload_start + 4], &1.0f32.to_le_bytes());
        // second tensor starts at the next 64-byte boundary
        assert_eq!(&bytes[payload_start + 64..payload_start + 68], &7.25f32.to_le_bytes());
        assert_eq!(bytes.len() % ALIGN, 0);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let c = sample();
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(back.fields, c.fields);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = ta.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut Value)) -> Vec<u8> {
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        edit(&mut header);
        let new_header = serde_json::to_vec(&header).unwrap();
        let old_start = align_up(16 + hlen);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&bytes[old_start..]);
        out
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let bytes = encode(&sample()).unwrap();
        let bad = rewrite_header(&bytes, |h| h["tensors"]["b"]["offset"] = Value::from(0));
        let err = decode(&bad).unwrap_err();
        assert!(matches!(err, Error::Tensor { .. }), "{err}");
        assert!(err.to_string().contains("overlaps"));
    }

    #[test]
    fn unknown_dtype_and_misalignment_rejected() {
        let bytes = encode(&sample()).unwrap();
        let bad = rewrite_header(&bytes, |h| h["tensors"]["a"]["dtype"] = Value::from("bf16"));
        let msg = decode(&bad).unwrap_err().to_string();
        assert!(msg.contains("`a`") && msg.contains("bf16"), "{msg}");
        let bad = rewrite_header(&bytes, |h| h["tensors"]["b"]["offset"] = Value::from(68));
        assert!(decode(&bad).unwrap_err().to_string().contains("aligned"));
    }

    #[test]
    fn truncation_names_first_unreadable_tensor() {
        let bytes = encode(&sample()).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = align_up(16 + hlen);
        // tensor `a` intact, `b` cut off
        let cut = &bytes[..payload_start + 64 + 2];
        let msg = decode(cut).unwrap_err().to_string();
        assert!(msg.contains("`b`") && msg.contains("truncated"), "{msg}");
        let cut = &bytes[..payload_start + 10];
        assert!(decode(cut).unwrap_err().to_string().contains("`a`"));
    }

    #[test]
    fn garbage_rejected() {
        assert!(matches!(decode(b"NOTMAGIC00000000"), Err(Error::Format(_))));
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 0xff;
        bytes[15] = 0x7f;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }
}
