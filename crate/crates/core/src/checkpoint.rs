//! Checkpoint archives in the safetensors layout.
//!
//! ```text
//! [u64 LE header length N][N bytes of JSON header][raw little-endian tensor data]
//! ```
//!
//! The header maps each parameter name to `{dtype, shape, data_offsets}`
//! and carries a `__metadata__` table of strings: the archive `format` and
//! `version`, the model configuration as TOML under `config`, and any extra
//! entries supplied by the caller (the trainer stores normalization stats).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::scalar::Scalar;

pub const FORMAT: &str = "fpdanet";
pub const VERSION: u32 = 1;

const METADATA_KEY: &str = "__metadata__";

/// One stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_values<T: Scalar>(shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
        values.iter().for_each(|v| v.write_le(&mut bytes));
        Entry { dtype: T::DTYPE.to_string(), shape: shape.to_vec(), bytes }
    }

    /// Decode into `T`, widening or narrowing if the stored dtype differs.
    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        match self.dtype.as_str() {
            "F32" => Ok(self.bytes.chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect()),
            "F64" => Ok(self.bytes.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect()),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        }
    }

    fn element_bytes(&self) -> Result<usize> {
        match self.dtype.as_str() {
            "F32" => Ok(4),
            "F64" => Ok(8),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        }
    }
}

/// Raw archive contents; useful for inspection and for editing in tests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        header.insert(METADATA_KEY.into(), json!(self.metadata));
        let mut offset = 0usize;
        for (name, e) in &self.tensors {
            let end = offset + e.bytes.len();
            header.insert(
                name.clone(),
                json!({ "dtype": e.dtype, "shape": e.shape, "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
        // pad so the data section starts 8-byte aligned
        while (8 + text.len()) % 8 != 0 {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + offset);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for e in self.tensors.values() {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 8 {
            return Err(bad("file too short for a header"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize.checked_add(n).filter(|&s| s <= bytes.len()).ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Map<String, Value> =
            serde_json::from_slice(&bytes[8..data_start]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut archive = Archive::default();
        for (name, v) in header {
            if name == METADATA_KEY {
                archive.metadata =
                    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
                continue;
            }
            let field = |k: &str| v.get(k).ok_or_else(|| Error::Checkpoint(format!("{name}: missing {k}")));
            let dtype = field("dtype")?.as_str().ok_or_else(|| bad("dtype is not a string"))?.to_string();
            let shape: Vec<usize> =
                serde_json::from_value(field("shape")?.clone()).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            let [start, end]: [usize; 2] = serde_json::from_value(field("data_offsets")?.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if start > end || end > data.len() {
                return Err(Error::Checkpoint(format!("{name}: data offsets out of range")));
            }
            let entry = Entry { dtype, shape, bytes: data[start..end].to_vec() };
            let expected = entry.shape.iter().product::<usize>() * entry.element_bytes()?;
            if expected != entry.bytes.len() {
                return Err(Error::Checkpoint(format!("{name}: byte length does not match shape")));
            }
            archive.tensors.insert(name, entry);
        }
        Ok(archive)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Snapshot of every parameter and buffer plus the config and `extra` metadata.
pub fn to_archive<T: Scalar>(model: &Model<T>, extra: &BTreeMap<String, String>) -> Archive {
    let mut metadata = extra.clone();
    metadata.insert("format".into(), FORMAT.into());
    metadata.insert("version".into(), VERSION.to_string());
    metadata.insert("config".into(), model.config().to_toml());
    let mut tensors = BTreeMap::new();
    model.visit("", &mut |name, p| {
        tensors.insert(name.to_string(), Entry::from_values(p.shape(), &p.value));
    });
    Archive { metadata, tensors }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, extra: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    to_archive(model, extra).write(path)
}

/// Rebuild the model from an archive using its embedded configuration.
/// Returns the model and the caller-supplied metadata entries.
pub fn from_archive<T: Scalar>(archive: &Archive) -> Result<(Model<T>, BTreeMap<String, String>)> {
    check_version(archive)?;
    let text = archive
        .metadata
        .get("config")
        .ok_or_else(|| Error::Checkpoint("archive has no embedded config".into()))?;
    let config = ModelConfig::from_toml(text)?;
    from_archive_with_config(archive, &config)
}

/// Load parameters into a model built from `config`, which must match the
/// stored tree exactly.
pub fn from_archive_with_config<T: Scalar>(
    archive: &Archive,
    config: &ModelConfig,
) -> Result<(Model<T>, BTreeMap<String, String>)> {
    check_version(archive)?;
    let mut model = Model::<T>::uninitialized(config)?;
    let mut offenders = Vec::new();
    let mut seen = Vec::new();
    let mut decode_error = None;
    model.visit_mut("", &mut |name, p| {
        seen.push(name.to_string());
        match archive.tensors.get(name) {
            None => offenders.push(format!("missing {name}")),
            Some(e) if e.shape != p.shape() => {
                offenders.push(format!("shape mismatch {name}: archive {:?}, model {:?}", e.shape, p.shape()))
            }
            Some(e) => match e.values::<T>() {
                Ok(v) => p.value = v,
                Err(err) => decode_error = Some(err),
            },
        }
    });
    if let Some(err) = decode_error {
        return Err(err);
    }
    for name in archive.tensors.keys() {
        if !seen.contains(name) {
            offenders.push(format!("unexpected {name}"));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::CheckpointMismatch { offenders });
    }
    let mut extra = archive.metadata.clone();
    for key in ["format", "version", "config"] {
        extra.remove(key);
    }
    Ok((model, extra))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, BTreeMap<String, String>)> {
    from_archive(&Archive::read(path)?)
}

pub fn load_checkpoint_with_config<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
) -> Result<(Model<T>, BTreeMap<String, String>)> {
    from_archive_with_config(&Archive::read(path)?, config)
}

fn check_version(archive: &Archive) -> Result<()> {
    match archive.metadata.get("format").map(String::as_str) {
        Some(FORMAT) => {}
        other => return Err(Error::Checkpoint(format!("unknown archive format {other:?}"))),
    }
    let version = archive.metadata.get("version").map(String::as_str).unwrap_or("");
    if version != VERSION.to_string() {
        return Err(Error::Checkpoint(format!("version mismatch: archive {version:?}, expected \"{VERSION}\"")));
    }
    Ok(())
}
