//! Reading and writing tensor containers.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, then `N` bytes of
//! JSON mapping every tensor name to `{"dtype", "shape", "data_offsets"}`,
//! then the raw little-endian payload. Offsets are relative to the start of
//! the payload. An optional `"__metadata__"` entry holds a string map.
//!
//! Values are widened to `f64` on read; `F32` and `F16` are storage types
//! only. Writing sorts tensors by name, packs them contiguously from offset
//! zero and emits the header without whitespace, so serialization is
//! byte-for-byte deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use half::f16;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            other => Err(Error::Format(format!("unknown dtype `{other}`"))),
        }
    }

    /// Rounds `v` to the nearest value representable in this dtype.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F16 => f16::from_f64(v).to_f64(),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense row-major tensor held at working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: Dtype, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if values.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            dtype,
            shape,
            values,
        })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(Dtype::F32, shape, values)
    }

    pub fn zeros(dtype: Dtype, shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Self::new(dtype, shape, vec![0.0; n])
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.values.len() * self.dtype.size()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same shape and values, different storage dtype.
    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    /// Replaces the values, keeping shape and dtype.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.dtype, self.shape.clone(), values)
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self.dtype {
            Dtype::F32 => {
                for &v in &self.values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in &self.values {
                    out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
                }
            }
        }
    }

    fn decode(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Self {
        let values = match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        };
        Tensor {
            dtype,
            shape,
            values,
        }
    }
}

pub(crate) fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}

/// Ordered name → tensor collection standing for a full set of model weights.
#[derive(Debug, Clone, Default)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: Option<BTreeMap<String, String>>,
    provenance: Option<PathBuf>,
}

impl PartialEq for TensorMap {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors && self.metadata == other.metadata
    }
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterates in ascending name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn provenance(&self) -> Option<&Path> {
        self.provenance.as_deref()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over the `(name, dtype, shape)` index, hex encoded.
    pub fn fingerprint(&self) -> String {
        index_fingerprint(
            self.tensors
                .iter()
                .map(|(n, t)| (n.as_str(), t.dtype(), t.shape())),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header: BTreeMap<&str, HeaderEntry<'_>> = BTreeMap::new();
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::InvalidArgument(format!(
                    "`{METADATA_KEY}` is reserved"
                )));
            }
            let end = offset + tensor.byte_len();
            header.insert(
                name,
                HeaderEntry::Tensor {
                    dtype: tensor.dtype.as_str(),
                    shape: &tensor.shape,
                    data_offsets: [offset, end],
                },
            );
            offset = end;
        }
        if let Some(meta) = &self.metadata {
            header.insert(METADATA_KEY, HeaderEntry::Metadata(meta));
        }
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;

        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for tensor in self.tensors.values() {
            tensor.encode_into(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "truncated file: {} bytes, need at least 8",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
            return Err(Error::Format(format!(
                "truncated file: header declares {header_len} bytes, {} available",
                bytes.len() - 8
            )));
        }
        let header_end = 8 + header_len as usize;
        let header: RawHeader = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("malformed JSON header: {e}")))?;
        let payload = &bytes[header_end..];

        let mut metadata = None;
        let mut index = Vec::with_capacity(header.0.len());
        let mut seen = std::collections::BTreeSet::new();
        for (name, value) in header.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            if name == METADATA_KEY {
                let meta: BTreeMap<String, String> = serde_json::from_value(value)
                    .map_err(|e| Error::Format(format!("bad {METADATA_KEY}: {e}")))?;
                metadata = Some(meta);
                continue;
            }
            let entry: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("bad entry for `{name}`: {e}")))?;
            let dtype = Dtype::parse(&entry.dtype)?;
            let [begin, end] = entry.data_offsets;
            let expected = element_count(&entry.shape)?
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
            if end < begin || end - begin != expected {
                return Err(Error::Format(format!(
                    "`{name}`: data_offsets [{begin}, {end}] span {} bytes, shape {:?} {dtype} needs {expected}",
                    end.saturating_sub(begin),
                    entry.shape
                )));
            }
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "`{name}`: data_offsets [{begin}, {end}] exceed payload of {} bytes",
                    payload.len()
                )));
            }
            index.push((begin, end, name, dtype, entry.shape));
        }

        index.sort_by_key(|e| (e.0, e.1));
        let mut cursor = 0usize;
        for (begin, end, name, ..) in &index {
            if *begin < cursor {
                return Err(Error::Format(format!(
                    "`{name}`: data_offsets [{begin}, {end}] overlap a preceding tensor"
                )));
            }
            if *begin > cursor {
                return Err(Error::Format(format!(
                    "`{name}`: gap in payload before offset {begin}"
                )));
            }
            cursor = *end;
        }
        if cursor != payload.len() {
            return Err(Error::Format(format!(
                "payload has {} trailing bytes",
                payload.len() - cursor
            )));
        }

        let tensors = index
            .into_iter()
            .map(|(begin, end, name, dtype, shape)| {
                (name, Tensor::decode(dtype, shape, &payload[begin..end]))
            })
            .collect();
        Ok(TensorMap {
            tensors,
            metadata,
            provenance: None,
        })
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorMap {
            tensors: iter.into_iter().collect(),
            metadata: None,
            provenance: None,
        }
    }
}

impl IntoIterator for TensorMap {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut map = TensorMap::from_bytes(&bytes)?;
    map.provenance = Some(path.to_path_buf());
    Ok(map)
}

pub fn write_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn index_fingerprint<'a>(
    entries: impl IntoIterator<Item = (&'a str, Dtype, &'a [usize])>,
) -> String {
    let mut hasher = Sha256::new();
    for (name, dtype, shape) in entries {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(dtype.as_str().as_bytes());
        for d in shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update([0xffu8]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderEntry<'a> {
    Tensor {
        dtype: &'a str,
        shape: &'a [usize],
        data_offsets: [usize; 2],
    },
    Metadata(&'a BTreeMap<String, String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header entries in file order; a plain map would silently drop duplicates.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some(entry) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push(entry);
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a container by hand, independent of `to_bytes`.
    fn hand_built(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn f32_payload(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn reads_hand_built_file() {
        let bytes = hand_built(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &f32_payload(&[1.0, 2.0, 3.0, 4.0]),
        );
        let map = TensorMap::from_bytes(&bytes).unwrap();
        let w = map.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.dtype(), Dtype::F32);
        assert_eq!(w.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_built_file_round_trips_byte_identically() {
        let bytes = hand_built(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &f32_payload(&[1.0, 2.0, 3.0, 4.0]),
        );
        let first = TensorMap::from_bytes(&bytes).unwrap().to_bytes().unwrap();
        assert_eq!(first, bytes);
        let second = TensorMap::from_bytes(&first).unwrap().to_bytes().unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn rejects_size_mismatch() {
        let bytes = hand_built(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}}"#,
            &f32_payload(&[1.0, 2.0, 3.0]),
        );
        let err = TensorMap::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("needs 16"), "{err}");
    }

    #[test]
    fn empty_header_is_empty_map() {
        let bytes = hand_built("{}", &[]);
        let map = TensorMap::from_bytes(&bytes).unwrap();
        assert!(map.is_empty());
        assert_eq!(TensorMap::new().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn packs_in_name_order() {
        let mut map = TensorMap::new();
        map.insert("b", Tensor::f32(vec![2], vec![5.0, 6.0]).unwrap());
        map.insert("a", Tensor::f32(vec![], vec![7.0]).unwrap());
        let bytes = map.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(
            header,
            r#"{"a":{"dtype":"F32","shape":[],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#
        );
    }

    #[test]
    fn f16_widens_and_round_trips() {
        let payload: Vec<u8> = [1.5f32, -0.25]
            .iter()
            .flat_map(|v| f16::from_f32(*v).to_le_bytes())
            .collect();
        let bytes = hand_built(
            r#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#,
            &payload,
        );
        let map = TensorMap::from_bytes(&bytes).unwrap();
        assert_eq!(map.get("h").unwrap().values(), &[1.5, -0.25]);
        assert_eq!(map.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn metadata_is_preserved() {
        let bytes = hand_built(
            r#"{"__metadata__":{"rank":"32"},"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &f32_payload(&[3.0]),
        );
        let map = TensorMap::from_bytes(&bytes).unwrap();
        assert_eq!(map.metadata().unwrap()["rank"], "32");
        assert_eq!(map.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let cases: Vec<(Vec<u8>, &str)> = vec![
            (vec![1, 2, 3], "truncated"),
            (hand_built("{", &[]), "malformed JSON"),
            (
                {
                    let mut b = hand_built("{}", &[]);
                    b[0] = 200;
                    b
                },
                "truncated",
            ),
            (
                hand_built(
                    r#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#,
                    &[0],
                ),
                "unknown dtype",
            ),
            (
                hand_built(
                    r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#,
                    &[0; 8],
                ),
                "overlap",
            ),
            (
                hand_built(
                    r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
                    &[0; 4],
                ),
                "exceed payload",
            ),
            (
                hand_built(
                    r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                    &[0; 8],
                ),
                "duplicate",
            ),
            (
                hand_built(
                    r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                    &[0; 8],
                ),
                "gap",
            ),
            (
                hand_built(
                    r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
                    &[0; 6],
                ),
                "trailing",
            ),
        ];
        for (bytes, needle) in cases {
            let err = TensorMap::from_bytes(&bytes).unwrap_err().to_string();
            assert!(err.contains(needle), "expected `{needle}` in `{err}`");
        }
    }

    #[test]
    fn fingerprint_ignores_values() {
        let mut a = TensorMap::new();
        a.insert("w", Tensor::f32(vec![2], vec![1.0, 2.0]).unwrap());
        let mut b = TensorMap::new();
        b.insert("w", Tensor::f32(vec![2], vec![9.0, 9.0]).unwrap());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.insert("v", Tensor::f32(vec![1], vec![0.0]).unwrap());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn file_round_trip_records_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut map = TensorMap::new();
        map.insert("w", Tensor::f32(vec![1], vec![0.5]).unwrap());
        write_checkpoint(&map, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.provenance(), Some(path.as_path()));
        assert!(matches!(
            read_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
