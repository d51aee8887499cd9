//! Manifest + blob archive format.
//!
//! An archive is two files: `<stem>.json`, a manifest listing every array
//! (name, shape, dtype, byte offset, byte length) plus free-form metadata,
//! and `<stem>.bin`, the concatenated little-endian raw values. Round trips
//! are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::store::ParameterStore;

pub const FORMAT: &str = "distill-archive/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub metadata: IndexMap<String, serde_json::Value>,
    pub entries: Vec<ArchiveEntry>,
}

/// In-memory archive: metadata plus named raw arrays.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    metadata: IndexMap<String, serde_json::Value>,
    arrays: IndexMap<String, (Vec<usize>, Dtype, Vec<u8>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_metadata(&mut self, key: &str, value: serde_json::Value) {
        self.metadata.insert(key.to_string(), value);
    }

    pub fn metadata(&self, key: &str) -> Option<&serde_json::Value> {
        self.metadata.get(key)
    }

    fn put(&mut self, name: &str, shape: &[usize], dtype: Dtype, bytes: Vec<u8>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n * dtype.size() != bytes.len() {
            return Err(Error::Shape(format!("`{name}`: shape {shape:?} vs {} bytes", bytes.len())));
        }
        if self.arrays.insert(name.to_string(), (shape.to_vec(), dtype, bytes)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        Ok(())
    }

    pub fn add_real<T: Real>(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
        data.iter().for_each(|x| x.write_le(&mut bytes));
        self.put(name, shape, T::DTYPE, bytes)
    }

    pub fn add_i64(&mut self, name: &str, shape: &[usize], data: &[i64]) -> Result<()> {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.put(name, shape, Dtype::I64, bytes)
    }

    /// Adds every parameter under `prefix/<name>`.
    pub fn add_params<T: Real>(&mut self, prefix: &str, store: &ParameterStore<T>) -> Result<()> {
        for (name, arr) in store.iter() {
            self.add_real(&format!("{prefix}/{name}"), arr.shape(), arr.data())?;
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    fn entry(&self, name: &str) -> Result<&(Vec<usize>, Dtype, Vec<u8>)> {
        self.arrays.get(name).ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    /// Reads a floating entry, converting between `f32` and `f64` as needed.
    pub fn real<T: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let (shape, dtype, bytes) = self.entry(name)?;
        let data = match dtype {
            Dtype::F32 => bytes.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            Dtype::F64 => bytes.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            Dtype::I64 => return Err(Error::Checkpoint(format!("`{name}` is integer"))),
        };
        Ok((shape.clone(), data))
    }

    pub fn i64s(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let (shape, dtype, bytes) = self.entry(name)?;
        if *dtype != Dtype::I64 {
            return Err(Error::Checkpoint(format!("`{name}` is not integer")));
        }
        let data = bytes.chunks(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((shape.clone(), data))
    }

    /// Collects every entry under `prefix/` into a parameter store.
    pub fn params<T: Real>(&self, prefix: &str) -> Result<ParameterStore<T>> {
        let lead = format!("{prefix}/");
        let mut store = ParameterStore::new();
        for name in self.arrays.keys() {
            if let Some(short) = name.strip_prefix(&lead) {
                let (shape, data) = self.real::<T>(name)?;
                store.insert(short, DenseArray::from_vec(&shape, data)?)?;
            }
        }
        if store.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under `{prefix}`")));
        }
        Ok(store)
    }

    /// Writes `<stem>.json` and `<stem>.bin`. `path` may name either file or the stem.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let (manifest_path, blob_path) = split_paths(path);
        let blob_name = blob_path.file_name().unwrap().to_string_lossy().into_owned();
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, (shape, dtype, bytes)) in &self.arrays {
            entries.push(ArchiveEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: *dtype,
                offset: blob.len() as u64,
                bytes: bytes.len() as u64,
            });
            blob.extend_from_slice(bytes);
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            blob: blob_name,
            metadata: self.metadata.clone(),
            entries,
        };
        if let Some(dir) = manifest_path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&blob_path, &blob)?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&manifest_path, text)?;
        Ok(manifest_path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest_path, _) = split_paths(path);
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", manifest.format)));
        }
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path)?;
        let mut arrays = IndexMap::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("`{}` extends past blob end", e.name)));
            }
            let n: usize = e.shape.iter().product();
            if n * e.dtype.size() != e.bytes as usize {
                return Err(Error::Checkpoint(format!("`{}` byte length does not match shape", e.name)));
            }
            arrays.insert(e.name, (e.shape, e.dtype, blob[start..end].to_vec()));
        }
        Ok(Self { metadata: manifest.metadata, arrays })
    }
}

/// True when both archive files exist for `path`.
pub fn exists(path: &Path) -> bool {
    let (m, b) = split_paths(path);
    m.is_file() && b.is_file()
}

fn split_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (stem.with_file_name(format!("{name}.json")), stem.with_file_name(format!("{name}.bin")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParameterStore::<f32>::new();
        store
            .insert("w", DenseArray::from_vec(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7]).unwrap())
            .unwrap();
        let mut a = Archive::new();
        a.set_metadata("kind", serde_json::json!("test"));
        a.add_params("net", &store).unwrap();
        a.add_real::<f64>("x", &[3], &[0.1, std::f64::consts::PI, -1e300]).unwrap();
        a.add_i64("ids", &[2], &[7, -3]).unwrap();
        let path = a.save(&dir.path().join("ckpt")).unwrap();
        assert!(exists(&path));
        let b = Archive::load(&path).unwrap();
        let back: ParameterStore<f32> = b.params("net").unwrap();
        for (x, y) in store.get("w").unwrap().data().iter().zip(back.get("w").unwrap().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let (_, x) = b.real::<f64>("x").unwrap();
        assert_eq!(x[1].to_bits(), std::f64::consts::PI.to_bits());
        assert_eq!(b.i64s("ids").unwrap().1, vec![7, -3]);
        assert_eq!(b.metadata("kind").unwrap(), "test");
        // re-saving yields identical bytes
        let p2 = b.save(&dir.path().join("again.json")).unwrap();
        assert_eq!(
            fs::read(p2.with_extension("bin")).unwrap(),
            fs::read(path.with_extension("bin")).unwrap()
        );
    }

    #[test]
    fn missing_entry_is_an_error() {
        let a = Archive::new();
        assert!(a.real::<f64>("nope").is_err());
        assert!(a.params::<f64>("net").is_err());
    }
}
