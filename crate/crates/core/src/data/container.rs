//! Versioned binary container for named `f64` tensors.
//!
//! Layout: magic `VQAT`, `u32` format version, `u64` header length, a JSON
//! header (kind, free-form metadata, tensor index), then the little-endian
//! tensor payload in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"VQAT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in scalars from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn index(&self) -> Vec<TensorEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                    offset,
                };
                offset += m.len();
                e
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: self.index(),
        })?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let tmp = match dir {
            Some(d) => tempfile::NamedTempFile::new_in(d)?,
            None => tempfile::NamedTempFile::new_in(".")?,
        };
        {
            let mut w = BufWriter::new(tmp.as_file());
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
            w.write_u64::<LittleEndian>(header.len() as u64)?;
            w.write_all(&header)?;
            for (_, m) in &self.tensors {
                for v in m.data() {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
            w.flush()?;
        }
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a tensor container"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != CONTAINER_VERSION {
            return Err(bad(&format!(
                "format version {version}, this build reads version {CONTAINER_VERSION}"
            )));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let mut data = vec![0.0; e.rows * e.cols];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| bad(&format!("truncated payload in tensor {}", e.name)))?;
            tensors.push((e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let c = Container {
            kind: "test".into(),
            metadata: serde_json::json!({"a": 1}),
            tensors: vec![
                ("x".into(), Matrix::from_vec(2, 2, vec![1.0, -0.1, 1e-300, 3.5])),
                ("y".into(), Matrix::scalar(f64::MIN_POSITIVE)),
            ],
        };
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.metadata["a"], 1);
        assert_eq!(back.tensors, c.tensors);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        Container {
            kind: "k".into(),
            metadata: serde_json::Value::Null,
            tensors: vec![("x".into(), Matrix::zeros(4, 4))],
        }
        .write(&path)
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Checkpoint(_))));
    }
}
