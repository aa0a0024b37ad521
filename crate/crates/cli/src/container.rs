// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//! The OSKC weight container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `OSKC` |
//! | 4 | version, u32, currently 1 |
//! | 8 | manifest length in bytes, u64 |
//! | manifest length | JSON manifest |
//! | padding | zeros up to the next multiple of 64 |
//! | rest | payload |
//!
//! The manifest holds an `entries` list (name, dtype, shape, offset and
//! length, with offsets relative to the payload start and 64-byte aligned)
//! and any number of metadata sections. Sections the reader does not know
//! about are carried through a load and save unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use oskt_core::numerics::DType;
use oskt_core::{Scalar, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"OSKC";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const HEADER_LEN: usize = 16;

/// A tensor in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Converts to `T`, rounding when narrowing from f64 to f32.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let shape_err = |e: oskt_core::Error| CliError::Format(e.to_string());
        Ok(match dtype {
            DType::F32 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect();
                StoredTensor::F32(Tensor::new(shape, data).map_err(shape_err)?)
            }
            DType::F64 => {
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                StoredTensor::F64(Tensor::new(shape, data).map_err(shape_err)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<EntryMeta>,
    #[serde(flatten)]
    pub sections: BTreeMap<String, Value>,
}

/// Named tensors plus metadata sections, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    tensors: Vec<(String, StoredTensor)>,
    sections: BTreeMap<String, Value>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> &[(String, StoredTensor)] {
        &self.tensors
    }

    /// Adds or replaces a tensor. Replacing keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn insert_all<'a, T: Scalar>(
        &mut self,
        prefix: &str,
        named: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
    ) {
        for (name, t) in named {
            self.insert(format!("{prefix}{name}"), StoredTensor::from_tensor(t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every tensor whose name starts with `prefix`, converted to `T`.
    /// Names keep their prefix.
    pub fn tensor_map<T: Scalar>(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.to_tensor()))
            .collect()
    }

    pub fn sections(&self) -> &BTreeMap<String, Value> {
        &self.sections
    }

    pub fn set_section<S: Serialize>(&mut self, key: &str, value: &S) -> Result<()> {
        if key == "entries" {
            return Err(CliError::Format("\"entries\" is reserved for the tensor table".into()));
        }
        let v = serde_json::to_value(value).map_err(|e| CliError::Format(format!("section {key}: {e}")))?;
        self.sections.insert(key.to_string(), v);
        Ok(())
    }

    pub fn section<D: DeserializeOwned>(&self, key: &str) -> Result<D> {
        let v = self
            .sections
            .get(key)
            .ok_or_else(|| CliError::Format(format!("container has no \"{key}\" section")))?;
        serde_json::from_value(v.clone()).map_err(|e| CliError::Format(format!("section {key}: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut cursor = 0usize;
        for (name, t) in &self.tensors {
            let length = t.numel() * t.dtype().size();
            entries.push(EntryMeta {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset: cursor as u64,
                length: length as u64,
            });
            cursor = align_up(cursor + length);
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.name.as_str())) {
            return Err(CliError::Format(format!("duplicate tensor name {}", dup.name)));
        }
        let manifest = Manifest {
            entries,
            sections: self.sections.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Format(e.to_string()))?;
        let payload_start = align_up(HEADER_LEN + json.len());
        let mut out = Vec::with_capacity(payload_start + cursor);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for ((_, t), e) in self.tensors.iter().zip(&manifest.entries) {
            out.resize(payload_start + e.offset as usize, 0);
            t.write_le(&mut out);
        }
        out.resize(align_up(out.len()), 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CliError::Format(format!("truncated header: {} bytes", bytes.len())));
        }
        let magic = &bytes[0..4];
        if magic != MAGIC {
            return Err(CliError::Format(format!(
                "bad magic {:02x?} ({:?}), expected \"OSKC\"",
                magic,
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CliError::Format(format!(
                "unsupported version {version} (bytes {:02x?}), expected {VERSION}",
                &bytes[4..8]
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let manifest_end = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                CliError::Format(format!(
                    "manifest of {manifest_len} bytes runs past the end of a {}-byte file",
                    bytes.len()
                ))
            })? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| CliError::Format(format!("manifest: {e}")))?;
        let payload_start = align_up(manifest_end);
        let payload_len = bytes.len().saturating_sub(payload_start) as u64;

        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let expected = numel.and_then(|n| n.checked_mul(e.dtype.size() as u64));
            if expected != Some(e.length) {
                return Err(CliError::Format(format!(
                    "entry {}: {} bytes recorded for {} of shape {:?}",
                    e.name,
                    e.length,
                    e.dtype.name(),
                    e.shape
                )));
            }
            if e.offset % ALIGN as u64 != 0 {
                return Err(CliError::Format(format!(
                    "entry {}: offset {} is not {ALIGN}-byte aligned",
                    e.name, e.offset
                )));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= payload_len)
                .ok_or_else(|| {
                    CliError::Format(format!(
                        "entry {}: bytes {}..{} exceed a payload of {payload_len} bytes (truncated file?)",
                        e.name,
                        e.offset,
                        e.offset.saturating_add(e.length)
                    ))
                })?;
            spans.push((e.offset, end, &e.name));
            let lo = payload_start + e.offset as usize;
            let t = StoredTensor::read_le(e.dtype, &e.shape, &bytes[lo..lo + e.length as usize])?;
            tensors.push((e.name.clone(), t));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(CliError::Format(format!("entries {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        if let Some((dup, _)) = tensors.iter().find(|(n, _)| !names.insert(n.clone())) {
            return Err(CliError::Format(format!("duplicate tensor name {dup}")));
        }
        Ok(Self {
            tensors,
            sections: manifest.sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        let t = Tensor::<f32>::from_f64(&[3, 2], &[1.0, -2.5, 3.25, 0.0, -0.0, 1e-30]).unwrap();
        c.insert("w", StoredTensor::F32(t));
        c
    }

    #[test]
    fn three_by_two_round_trips() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"OSKC");
        assert_eq!(bytes.len() % ALIGN, 0);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("XSKC"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Container::from_bytes(&bytes), Err(CliError::Format(_))));
    }

    #[test]
    fn empty_container_has_empty_payload() {
        let bytes = Container::new().to_bytes().unwrap();
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), align_up(HEADER_LEN + manifest_len));
        assert!(Container::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - ALIGN]).unwrap_err();
        assert!(matches!(err, CliError::Format(_)), "{err}");
        assert!(Container::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn unknown_sections_survive_rewrite() {
        let mut c = sample();
        c.set_section("kind", &"teacher").unwrap();
        let mut bytes = c.to_bytes().unwrap();
        // splice a foreign key into the manifest by hand
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        manifest.insert("x_note".into(), serde_json::json!({"by": "another tool", "n": [1, 2]}));
        let json = serde_json::to_vec(&manifest).unwrap();
        let payload = bytes.split_off(align_up(16 + len));
        let mut rebuilt = bytes[..8].to_vec();
        rebuilt.extend_from_slice(&(json.len() as u64).to_le_bytes());
        rebuilt.extend_from_slice(&json);
        rebuilt.resize(align_up(rebuilt.len()), 0);
        rebuilt.extend_from_slice(&payload);

        let loaded = Container::from_bytes(&rebuilt).unwrap();
        let again = Container::from_bytes(&loaded.to_bytes().unwrap()).unwrap();
        assert_eq!(again.sections()["x_note"]["by"], "another tool");
        assert_eq!(again.section::<String>("kind").unwrap(), "teacher");
    }

    #[test]
    fn overlapping_entries_are_rejected() {
        let mut c = sample();
        c.insert("v", StoredTensor::F64(Tensor::zeros(&[2])));
        let bytes = c.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        manifest.entries[1].offset = 0;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut rebuilt = bytes[..8].to_vec();
        rebuilt.extend_from_slice(&(json.len() as u64).to_le_bytes());
        rebuilt.extend_from_slice(&json);
        rebuilt.resize(align_up(rebuilt.len()) + 2 * ALIGN, 0);
        let err = Container::from_bytes(&rebuilt).unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
    }
}
