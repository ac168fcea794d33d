//! LMLN container: `"LMLN"`, u32 LE version, u64 LE header length, a JSON
//! header, then little-endian tensor payloads at 64-byte-aligned offsets
//! relative to the (also aligned) start of the data section.
//!
//! Model weights are always written as `f32`. Other containers (surrogates,
//! gates, activation records) may carry `f64` payloads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Tensor};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LMLN";
const VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

/// Named tensors plus a `config` object and optional `meta` object.
/// Payloads are held as `f64`, which represents `f32` data exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub config: Value,
    pub meta: Option<Value>,
    pub tensors: BTreeMap<String, (Dtype, Tensor<f64>)>,
}

impl Container {
    pub fn new(config: Value) -> Self {
        Container {
            config,
            meta: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: Dtype, t: Tensor<f64>) {
        self.tensors.insert(name.into(), (dtype, t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        header.insert("config".into(), self.config.clone());
        if let Some(meta) = &self.meta {
            header.insert("meta".into(), meta.clone());
        }
        let mut offset = 0usize;
        for (name, (dtype, t)) in &self.tensors {
            if name == "config" || name == "meta" {
                return Err(Error::Format(format!("reserved tensor name `{name}`")));
            }
            let byte_len = t.len() * dtype.size();
            let entry = TensorEntry {
                dtype: *dtype,
                shape: t.shape.clone(),
                offset: offset as u64,
                byte_len: byte_len as u64,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset = align(offset + byte_len);
        }
        let header = serde_json::to_vec(&Value::Object(header))?;
        let data_start = align(PREAMBLE + header.len());
        let mut out = Vec::with_capacity(data_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(data_start, 0);
        for (dtype, t) in self.tensors.values() {
            match dtype {
                Dtype::F32 => {
                    for &v in &t.data {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in &t.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            let len = align(out.len() - data_start);
            out.resize(data_start + len, 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = PREAMBLE
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file")))?;
        let header: Value = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(mut header) = header else {
            return Err(Error::Format("header is not a JSON object".into()));
        };
        let config = header
            .remove("config")
            .ok_or_else(|| Error::Format("header has no `config`".into()))?;
        let meta = header.remove("meta");
        let data_start = align(header_end);
        let mut tensors = BTreeMap::new();
        for (name, entry) in header {
            let entry: TensorEntry = serde_json::from_value(entry)
                .map_err(|e| Error::Format(format!("entry for `{name}`: {e}")))?;
            let n: usize = entry.shape.iter().product();
            if entry.byte_len as usize != n * entry.dtype.size() {
                return Err(Error::Format(format!(
                    "`{name}`: byte_len {} does not match shape {:?}",
                    entry.byte_len, entry.shape
                )));
            }
            if entry.offset as usize % ALIGN != 0 {
                return Err(Error::Format(format!(
                    "`{name}`: offset {} is not {ALIGN}-byte aligned",
                    entry.offset
                )));
            }
            let start = data_start + entry.offset as usize;
            let end = start + entry.byte_len as usize;
            if end > bytes.len() {
                return Err(Error::Format(format!(
                    "`{name}`: payload ends at byte {end}, file has {} (truncated?)",
                    bytes.len()
                )));
            }
            let raw = &bytes[start..end];
            let data: Vec<f64> = match entry.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.insert(name, (entry.dtype, Tensor::new(&entry.shape, data)?));
        }
        Ok(Container {
            config,
            meta,
            tensors,
        })
    }
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let bytes = c.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

/// Writes every parameter as `f32`. An `f32` model round-trips bit-exactly;
/// an `f64` model is rounded to `f32`.
pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_container(path, &model_container(model)?)
}

pub fn model_container<T: Scalar>(model: &Model<T>) -> Result<Container> {
    let mut c = Container::new(serde_json::to_value(&model.config)?);
    for (name, t) in &model.params {
        c.insert(name.clone(), Dtype::F32, t.cast());
    }
    Ok(c)
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let c = read_container(path)?;
    model_from_container(c)
}

pub fn model_from_container<T: Scalar>(c: Container) -> Result<Model<T>> {
    let config: ModelConfig =
        serde_json::from_value(c.config).map_err(|e| Error::Format(format!("config: {e}")))?;
    let mut params = BTreeMap::new();
    for (name, (dtype, t)) in c.tensors {
        if dtype != Dtype::F32 {
            return Err(Error::Format(format!(
                "model tensor `{name}` has dtype {dtype:?}, expected f32"
            )));
        }
        params.insert(name, t.cast());
    }
    Model::new(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model<f32> {
        Model::init(ModelConfig::gpt2_like(8, 2, 2, 16), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lmln");
        let m = tiny();
        save_weights(&m, &path).unwrap();
        let back: Model<f32> = load_weights(&path).unwrap();
        assert!(m.bit_eq(&back));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LMLN");
        assert_eq!(bytes.len() % ALIGN, 0);
    }

    #[test]
    fn offsets_are_aligned() {
        let c = model_container(&tiny()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        for (k, v) in header.as_object().unwrap() {
            if k != "config" {
                assert_eq!(v["offset"].as_u64().unwrap() % 64, 0);
                assert_eq!(v["dtype"], "f32");
            }
        }
    }

    #[test]
    fn truncated_and_corrupt_files_error() {
        let bytes = model_container(&tiny()).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 15, 40, bytes.len() - 1] {
            assert!(
                Container::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(
            matches!(Container::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version"))
        );
    }

    #[test]
    fn unknown_tensor_is_named() {
        let mut c = model_container(&tiny()).unwrap();
        c.insert("mystery", Dtype::F32, Tensor::zeros(&[2]));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let err = model_from_container::<f32>(back).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn f64_payloads_round_trip() {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.meta = Some(serde_json::json!({"lambda": 0.01}));
        c.insert("w", Dtype::F64, Tensor::vector(vec![0.1, 1e-300, -7.25]));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
