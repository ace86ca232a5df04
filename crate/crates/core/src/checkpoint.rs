//! Checkpoint container: named tensors plus a flat key=value metadata block,
//! stored as a safetensors file.
//!
//! All metadata lives under a single `mdta2g` header entry as sorted
//! `key=value` lines so that files are byte-for-byte reproducible.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

const HEADER_KEY: &str = "mdta2g";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::arg(format!("checkpoint has no tensor {name}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::arg(format!("checkpoint has no metadata key {key}")))
    }

    /// Parses a metadata value, naming the key on failure.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.meta(key)?
            .parse()
            .map_err(|e| Error::config(format!("metadata {key}: {e}")))
    }
}

/// Encodes metadata as sorted `key=value` lines.
pub fn encode_metadata(metadata: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::new();
    for (k, v) in metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::arg(format!("metadata entry {k:?} contains a reserved character")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_metadata(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn container_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn save(path: &Path, tensors: &[(String, Tensor)], metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut meta = metadata.clone();
    meta.insert("format_version".into(), FORMAT_VERSION.into());
    let info = HashMap::from([(HEADER_KEY.to_string(), encode_metadata(&meta)?)]);
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(contiguous.iter().map(|(n, t)| (n.as_str(), t)), Some(info), path)
        .map_err(|e| container_err(path, e))
}

pub fn load(path: &Path, device: &Device) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| container_err(path, e))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| container_err(path, "missing metadata header"))?;
    let metadata = decode_metadata(text)?;
    if metadata.get("format_version").map(String::as_str) != Some(FORMAT_VERSION) {
        return Err(container_err(path, "unsupported format version"));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| container_err(path, e))?;
    Ok(Container { tensors, metadata })
}
