//! Binary checkpoint archive.
//!
//! ```text
//! [0..8)        u64 little-endian N, header length
//! [8..8+N)      UTF-8 JSON: name -> {"dtype":"F32","shape":[..],"data_offsets":[begin,end]}
//!               plus an optional "__metadata__": {string: string}
//! [8+N..)       little-endian f32 data, tensors packed in name order
//! ```
//!
//! Offsets are relative to the data region, ascending in name order, and
//! must cover it exactly. The writer emits a canonical form (sorted keys, no
//! whitespace), so equal maps always produce identical bytes. This is the
//! F32 subset of the safetensors layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use evomerge_core::{Tensor, TensorMap};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 100 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data region: header needs {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: {reason}")]
    Layout { name: String, reason: String },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ArchiveOptions {
    pub allow_nonfinite: bool,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    data_offsets: [u64; 2],
    dtype: String,
    shape: Vec<usize>,
}

enum HeaderValue {
    Tensor(Entry),
    Metadata(BTreeMap<String, String>),
}

/// Header map that rejects repeated keys instead of keeping the last one.
struct Header(BTreeMap<String, HeaderValue>);

impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = Header;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Header, A::Error> {
                let mut out = BTreeMap::new();
                while let Some(key) = map.next_key::<String>()? {
                    if out.contains_key(&key) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate tensor name `{key}`"
                        )));
                    }
                    let value = if key == METADATA_KEY {
                        HeaderValue::Metadata(map.next_value()?)
                    } else {
                        HeaderValue::Tensor(map.next_value().map_err(|e: A::Error| {
                            serde::de::Error::custom(format!("tensor `{key}`: {e}"))
                        })?)
                    };
                    out.insert(key, value);
                }
                Ok(Header(out))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

fn layout(name: &str, reason: impl Into<String>) -> ArchiveError {
    ArchiveError::Layout {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Serializes a map into canonical archive bytes.
pub fn encode(map: &TensorMap, opts: ArchiveOptions) -> Result<Vec<u8>, ArchiveError> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        if name == METADATA_KEY {
            return Err(layout(name, "name is reserved for metadata"));
        }
        if !opts.allow_nonfinite && !tensor.is_finite() {
            return Err(ArchiveError::NonFinite(name.to_string()));
        }
        let end = offset + 4 * tensor.numel() as u64;
        let entry = Entry {
            data_offsets: [offset, end],
            dtype: "F32".to_string(),
            shape: tensor.shape().to_vec(),
        };
        header.insert(
            name.to_string(),
            serde_json::to_value(entry).expect("entry serializes"),
        );
        offset = end;
    }
    if !map.metadata().is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(map.metadata()).expect("metadata serializes"),
        );
    }
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, tensor) in map.iter() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses archive bytes, validating the header against the data region.
pub fn decode(bytes: &[u8], opts: ArchiveOptions) -> Result<TensorMap, ArchiveError> {
    if bytes.len() < 8 {
        return Err(ArchiveError::MalformedHeader(format!(
            "file is {} bytes, shorter than the length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if n == 0 {
        return Err(ArchiveError::MalformedHeader("header length is 0".into()));
    }
    if n > MAX_HEADER {
        return Err(ArchiveError::MalformedHeader(format!(
            "header length {n} is implausibly large"
        )));
    }
    let header_end = 8 + n;
    if header_end > bytes.len() as u64 {
        return Err(ArchiveError::Truncated {
            expected: header_end,
            actual: bytes.len() as u64,
        });
    }
    let header_bytes = &bytes[8..header_end as usize];
    let text = std::str::from_utf8(header_bytes)
        .map_err(|e| ArchiveError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let Header(entries) = serde_json::from_str(text.trim_end_matches(' ')).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("duplicate tensor name `") {
            Some(rest) => {
                ArchiveError::DuplicateName(rest.split('`').next().unwrap_or("").to_string())
            }
            None => ArchiveError::MalformedHeader(msg),
        }
    })?;
    let data = &bytes[header_end as usize..];

    let mut map = TensorMap::new();
    let mut cursor = 0u64;
    for (name, value) in entries {
        let entry = match value {
            HeaderValue::Metadata(meta) => {
                *map.metadata_mut() = meta;
                continue;
            }
            HeaderValue::Tensor(entry) => entry,
        };
        if entry.dtype != "F32" {
            return Err(layout(&name, format!("unsupported dtype {}", entry.dtype)));
        }
        let [begin, end] = entry.data_offsets;
        if begin != cursor {
            return Err(layout(
                &name,
                format!("data_offsets begin at {begin}, expected {cursor} (offsets must be contiguous in name order)"),
            ));
        }
        if end < begin {
            return Err(layout(&name, "data_offsets end before they begin"));
        }
        let numel: usize = entry.shape.iter().product();
        if end - begin != 4 * numel as u64 {
            return Err(layout(
                &name,
                format!(
                    "shape {:?} needs {} bytes, offsets span {}",
                    entry.shape,
                    4 * numel,
                    end - begin
                ),
            ));
        }
        if end > data.len() as u64 {
            return Err(ArchiveError::Truncated {
                expected: header_end + end,
                actual: bytes.len() as u64,
            });
        }
        let values: Vec<f32> = data[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape, values).map_err(|e| layout(&name, e.to_string()))?;
        if !opts.allow_nonfinite && !tensor.is_finite() {
            return Err(ArchiveError::NonFinite(name));
        }
        map.insert(name, tensor);
        cursor = end;
    }
    if cursor != data.len() as u64 {
        return Err(layout(
            "<data region>",
            format!(
                "tensors cover {cursor} bytes but the data region has {}",
                data.len()
            ),
        ));
    }
    Ok(map)
}

pub fn load_archive(path: &Path, opts: ArchiveOptions) -> Result<TensorMap, ArchiveError> {
    let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, opts)
}

/// Writes the canonical encoding of `map`, via a temporary file renamed into place.
pub fn save_archive(
    map: &TensorMap,
    path: &Path,
    opts: ArchiveOptions,
) -> Result<(), ArchiveError> {
    let bytes = encode(map, opts)?;
    write_atomic(path, &bytes).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        m
    }

    fn raw(header: &str, data: &[f32]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn single_tensor_round_trip() {
        let bytes = encode(&sample(), ArchiveOptions::default()).unwrap();
        let back = decode(&bytes, ArchiveOptions::default()).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back, ArchiveOptions::default()).unwrap(), bytes);
    }

    #[test]
    fn exact_header_bytes() {
        let bytes = encode(&sample(), ArchiveOptions::default()).unwrap();
        let header = r#"{"w":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}}"#;
        assert_eq!(bytes, raw(header, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn empty_map_is_valid() {
        let bytes = encode(&TensorMap::new(), ArchiveOptions::default()).unwrap();
        assert_eq!(&bytes[8..], b"{}");
        assert!(decode(&bytes, ArchiveOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn metadata_survives() {
        let mut m = sample();
        m.metadata_mut().insert("source".into(), "unit".into());
        let back = decode(
            &encode(&m, ArchiveOptions::default()).unwrap(),
            ArchiveOptions::default(),
        )
        .unwrap();
        assert_eq!(back.metadata().get("source").unwrap(), "unit");
    }

    #[test]
    fn zero_header_length_rejected() {
        let mut bytes = 0u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            decode(&bytes, ArchiveOptions::default()),
            Err(ArchiveError::MalformedHeader(_))
        ));
    }

    #[test]
    fn truncated_data_rejected() {
        let mut bytes = encode(&sample(), ArchiveOptions::default()).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode(&bytes, ArchiveOptions::default()),
            Err(ArchiveError::Truncated { .. })
        ));
        let short = raw(
            r#"{"w":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}}"#,
            &[],
        )[..20]
            .to_vec();
        assert!(matches!(
            decode(&short, ArchiveOptions::default()),
            Err(ArchiveError::Truncated { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let header = r#"{"a":{"data_offsets":[0,4],"dtype":"F32","shape":[1]},"a":{"data_offsets":[4,8],"dtype":"F32","shape":[1]}}"#;
        match decode(&raw(header, &[1.0, 2.0]), ArchiveOptions::default()) {
            Err(ArchiveError::DuplicateName(name)) => assert_eq!(name, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_offset_mismatch_names_tensor() {
        let header = r#"{"w":{"data_offsets":[0,12],"dtype":"F32","shape":[2,2]}}"#;
        match decode(&raw(header, &[1.0, 2.0, 3.0]), ArchiveOptions::default()) {
            Err(ArchiveError::Layout { name, .. }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaps_and_uncovered_bytes_rejected() {
        let gap = r#"{"a":{"data_offsets":[4,8],"dtype":"F32","shape":[1]}}"#;
        assert!(matches!(
            decode(&raw(gap, &[1.0, 2.0]), ArchiveOptions::default()),
            Err(ArchiveError::Layout { .. })
        ));
        let extra = r#"{"a":{"data_offsets":[0,4],"dtype":"F32","shape":[1]}}"#;
        assert!(matches!(
            decode(&raw(extra, &[1.0, 2.0]), ArchiveOptions::default()),
            Err(ArchiveError::Layout { .. })
        ));
        // offsets out of name order
        let swapped = r#"{"a":{"data_offsets":[4,8],"dtype":"F32","shape":[1]},"b":{"data_offsets":[0,4],"dtype":"F32","shape":[1]}}"#;
        assert!(matches!(
            decode(&raw(swapped, &[1.0, 2.0]), ArchiveOptions::default()),
            Err(ArchiveError::Layout { .. })
        ));
    }

    #[test]
    fn other_dtypes_rejected() {
        let header = r#"{"a":{"data_offsets":[0,4],"dtype":"I32","shape":[1]}}"#;
        assert!(matches!(
            decode(&raw(header, &[1.0]), ArchiveOptions::default()),
            Err(ArchiveError::Layout { .. })
        ));
    }

    #[test]
    fn nonfinite_needs_opt_in() {
        let mut m = TensorMap::new();
        m.insert("bad", Tensor::vector(vec![1.0, f32::NAN]));
        match encode(&m, ArchiveOptions::default()) {
            Err(ArchiveError::NonFinite(name)) => assert_eq!(name, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        let allow = ArchiveOptions {
            allow_nonfinite: true,
        };
        let bytes = encode(&m, allow).unwrap();
        assert!(matches!(
            decode(&bytes, ArchiveOptions::default()),
            Err(ArchiveError::NonFinite(_))
        ));
        assert!(decode(&bytes, allow).unwrap().bit_eq(&m));
    }

    #[test]
    fn padded_header_is_accepted() {
        let header = r#"{"a":{"data_offsets":[0,4],"dtype":"F32","shape":[]}}   "#;
        let m = decode(&raw(header, &[5.0]), ArchiveOptions::default()).unwrap();
        assert_eq!(m.get("a").unwrap().data(), &[5.0]);
    }
}
