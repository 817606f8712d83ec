//! Tensor dumps: a flat blob of little-endian `f64` plus a JSON sidecar
//! holding the shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::image::write_atomic;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub const DTYPE: &str = "f64-le";

pub fn encode(tensors: &[&Tensor]) -> Vec<u8> {
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(total * 8);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a blob into tensors of the given shapes; the blob must be used up
/// exactly.
pub fn decode(bytes: &[u8], shapes: &[Vec<usize>], origin: &Path) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: format!("blob has {} bytes, shapes need {}", bytes.len(), total * 8),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), values.by_ref().take(n).collect())
        })
        .collect()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `path` and `path.json`.
pub fn save_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let header = TensorHeader {
        shape: tensor.shape().to_vec(),
        dtype: DTYPE.into(),
    };
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(path, e))?;
    write_atomic(&sidecar_path(path), &json)?;
    write_atomic(path, &encode(&[tensor]))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let header: TensorHeader = serde_json::from_slice(&text).map_err(|e| Error::json(&side, e))?;
    if header.dtype != DTYPE {
        return Err(Error::Parse {
            path: side,
            line: 0,
            message: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes, &[header.shape], path)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::from_fn([2, 3, 1, 2], |i| (i as f64).sqrt() - 1e-300);
        save_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
        assert_eq!(fs::read(&path).unwrap().len(), 12 * 8);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = decode(&[0u8; 12], &[vec![2]], Path::new("x.bin")).unwrap_err();
        assert!(err.to_string().contains("x.bin"));
    }
}
