//! Portable tensor container: a ZIP holding `manifest.json` plus one raw
//! little-endian `f32` blob per tensor.
//!
//! ```text
//! manifest.json   [{"name": "conv1_1.weight", "shape": [64, 3, 3, 3], "dtype": "f32", "file": "conv1_1.weight.bin"}, ...]
//! conv1_1.weight.bin   4 × 64·3·3·3 bytes, row-major
//! ```

use std::collections::HashSet;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";

/// One entry of the on-disk manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

/// In-memory manifest entry pointing into the contiguous blob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub blob_offset: usize,
}

impl ArchiveEntry {
    pub fn byte_len(&self) -> usize {
        4 * self.shape.iter().product::<usize>()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    entries: Vec<ArchiveEntry>,
    blob: Vec<u8>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Appends a tensor, stored as little-endian `f32`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let values: Vec<f32> = tensor.data().iter().map(|&v| v as f32).collect();
        self.insert_f32(name, tensor.shape(), &values)
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: &[usize], values: &[f32]) -> Result<()> {
        let name = name.into();
        if self.contains(&name) {
            return Err(Error::Archive(format!("duplicate tensor name {name}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        let blob_offset = self.blob.len();
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(ArchiveEntry {
            name,
            shape: shape.to_vec(),
            blob_offset,
        });
        Ok(())
    }

    pub fn raw_bytes(&self, name: &str) -> Result<&[u8]> {
        let e = self.entry(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(&self.blob[e.blob_offset..e.blob_offset + e.byte_len()])
    }

    pub fn values_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self
            .raw_bytes(name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let data = self.values_f32(name)?.into_iter().map(f64::from).collect();
        Tensor::from_vec(&e.shape, data)
    }

    /// Checks that every entry fits in the blob and that names are unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Archive(format!("duplicate tensor name {}", e.name)));
            }
            if e.blob_offset + e.byte_len() > self.blob.len() {
                return Err(Error::Archive(format!("{} overruns the blob", e.name)));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.entries
            .iter()
            .map(|e| ManifestRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: "f32".into(),
                file: format!("{}.bin", e.name),
            })
            .collect()
    }

    /// Serializes to ZIP bytes. Output is byte-identical for identical content.
    pub fn to_zip_bytes(&self) -> Result<Vec<u8>> {
        let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Deflated)
            .last_modified_time(DateTime::default());
        let zip_err = |e: zip::result::ZipError| Error::Archive(e.to_string());
        let manifest = serde_json::to_vec_pretty(&self.manifest()).map_err(|e| Error::Archive(e.to_string()))?;
        zip.start_file(MANIFEST_NAME, opts).map_err(zip_err)?;
        zip.write_all(&manifest)?;
        for (rec, e) in self.manifest().iter().zip(&self.entries) {
            zip.start_file(rec.file.as_str(), opts).map_err(zip_err)?;
            zip.write_all(&self.blob[e.blob_offset..e.blob_offset + e.byte_len()])?;
        }
        Ok(zip.finish().map_err(zip_err)?.into_inner())
    }

    pub fn from_zip_bytes(bytes: &[u8]) -> Result<Self> {
        let zip_err = |e: zip::result::ZipError| Error::Archive(e.to_string());
        let mut zip = ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;
        let manifest: Vec<ManifestRecord> = {
            let mut f = zip.by_name(MANIFEST_NAME).map_err(zip_err)?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            serde_json::from_slice(&buf).map_err(|e| Error::Archive(format!("bad manifest: {e}")))?
        };
        let mut archive = WeightArchive::new();
        for rec in manifest {
            if rec.dtype != "f32" {
                return Err(Error::Archive(format!("{}: unsupported dtype {}", rec.name, rec.dtype)));
            }
            let mut f = zip
                .by_name(&rec.file)
                .map_err(|_| Error::Archive(format!("{}: blob file {} missing", rec.name, rec.file)))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            let expected = 4 * rec.shape.iter().product::<usize>();
            if buf.len() != expected {
                return Err(Error::Archive(format!(
                    "{}: blob holds {} bytes, shape {:?} needs {expected}",
                    rec.name,
                    buf.len(),
                    rec.shape
                )));
            }
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            archive.insert_f32(rec.name, &rec.shape, &values)?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_zip_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_zip_bytes(&std::fs::read(path)?)
    }
}
