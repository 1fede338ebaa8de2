//! Model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "GPCKPT01"
//! u64       header length in bytes
//! header    UTF-8 JSON: { "arch": <architecture text>,
//!                         "category_count": C,
//!                         "manifest": [{ "name", "shape", "offset" }, ...] }
//! payload   f64 values of every parameter, concatenated; `offset` counts
//!           values (not bytes) from the start of the payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archspec::parse_arch;
use crate::error::{Error, Result};
use crate::nn::model::{Model, Param};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GPCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: String,
    category_count: usize,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut offset = 0;
    let manifest = model
        .params()
        .iter()
        .map(|p| {
            let entry = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        arch: model.arch().to_text(),
        category_count: model.category_count(),
        manifest,
    })?;

    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for p in model.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Model> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint(
            "payload is not a whole number of f64s".into(),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let params = header
        .manifest
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("parameter {} runs past the payload", e.name))
                })?
                .to_vec();
            Ok(Param {
                name: e.name,
                value: Tensor::new(e.shape, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let arch = parse_arch(&header.arch)?;
    Model::from_parts(&arch, header.category_count, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::builtin;

    #[test]
    fn load_of_save_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["vgg-tiny", "res-tiny"] {
            let model = Model::build_from_arch(&builtin(name).unwrap(), 3, 17).unwrap();
            let path = dir.path().join(format!("{name}.gpck"));
            save(&model, &path).unwrap();
            assert_eq!(load(&path).unwrap(), model);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gpck");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gpck");
        let model = Model::build_from_arch(&builtin("vgg-tiny").unwrap(), 3, 1).unwrap();
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 80]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
