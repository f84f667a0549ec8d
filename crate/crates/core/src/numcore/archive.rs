//! Tensor archive: 8-byte little-endian header length, UTF-8 JSON header,
//! then a contiguous little-endian payload. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;

/// An n-dimensional tensor stored as f64. Archives may hold f32 payloads,
/// which are widened to f64 on load.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "expected 2-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<HeaderEntry>,
}

/// Ordered map of named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::Format {
                offset: 0,
                msg: format!("duplicate tensor name {name:?}"),
            });
        }
        self.tensors.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("missing tensor {name:?}"),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(HeaderEntry {
                name: name.clone(),
                dtype: "f64".to_string(),
                shape: t.shape.clone(),
                offset,
            });
            offset += (t.data.len() * 8) as u64;
        }
        let header = Header {
            version: 1,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, t) in &self.tensors {
            for v in &t.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes).map_err(|_| Error::Format {
            offset: 0,
            msg: "file too short for header length".into(),
        })?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes).map_err(|_| Error::Format {
            offset: 8,
            msg: "truncated header".into(),
        })?;
        let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Format {
            offset: 8,
            msg: format!("malformed header JSON: {e}"),
        })?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        let payload_len = payload.len() as u64;
        let payload_base = 8 + header_len as u64;

        let mut seen = std::collections::HashSet::new();
        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(Error::Format {
                    offset: payload_base,
                    msg: format!("duplicate tensor name {:?}", e.name),
                });
            }
            let count: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => {
                    return Err(Error::Format {
                        offset: payload_base + e.offset,
                        msg: format!("unsupported dtype {other:?}"),
                    })
                }
            };
            let bytes = (count * width) as u64;
            if e.offset + bytes > payload_len {
                return Err(Error::Format {
                    offset: payload_base + e.offset,
                    msg: format!(
                        "tensor {:?} extends past payload ({} > {})",
                        e.name,
                        e.offset + bytes,
                        payload_len
                    ),
                });
            }
            spans.push((e.offset, e.offset + bytes));
            let raw = &payload[e.offset as usize..(e.offset + bytes) as usize];
            let data: Vec<f64> = match width {
                8 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                _ => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Format {
                    offset: payload_base + w[1].0,
                    msg: "overlapping tensor payloads".into(),
                });
            }
        }
        Ok(TensorArchive {
            tensors,
            meta: header.meta,
        })
    }
}

/// Convenience wrapper over [`TensorArchive::write`].
pub fn archive_write(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut a = TensorArchive::new();
    for (name, t) in tensors {
        a.insert(name, t.clone())?;
    }
    a.write(path)
}

/// Convenience wrapper over [`TensorArchive::read`].
pub fn archive_read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(TensorArchive::read(path)?.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let a = TensorArchive::new();
        a.write(&path).unwrap();
        let b = TensorArchive::read(&path).unwrap();
        assert!(b.tensors.is_empty());
    }

    #[test]
    fn single_tensor_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25e-300, f64::MIN_POSITIVE]).unwrap();
        let mut a = TensorArchive::new();
        a.insert("w", t.clone()).unwrap();
        a.write(&path).unwrap();
        let b = TensorArchive::read(&path).unwrap();
        let r = b.get("w").unwrap();
        assert_eq!(r.shape, t.shape);
        for (x, y) in r.data.iter().zip(&t.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut a = TensorArchive::new();
        a.insert("x", Tensor::from_vec(&[1.0])).unwrap();
        assert!(a.insert("x", Tensor::from_vec(&[2.0])).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let mut a = TensorArchive::new();
        a.insert("x", Tensor::from_vec(&[1.0, 2.0, 3.0])).unwrap();
        a.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            TensorArchive::read(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = 5u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{oops");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            TensorArchive::read(&path),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn f32_widening() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.bin");
        let header = serde_json::json!({
            "version": 1,
            "meta": {},
            "tensors": [{"name": "x", "dtype": "f32", "shape": [2], "offset": 0}]
        });
        let hb = serde_json::to_vec(&header).unwrap();
        let mut bytes = (hb.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(&hb);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let a = TensorArchive::read(&path).unwrap();
        assert_eq!(a.get("x").unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn fifty_tensors_shuffled_round_trip() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut names: Vec<usize> = (0..50).collect();
        names.shuffle(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.bin");
        let mut a = TensorArchive::new();
        for &i in &names {
            let t = Tensor::from_vec(&vec![i as f64; i % 7 + 1]);
            a.insert(&format!("t{i}"), t).unwrap();
        }
        a.write(&path).unwrap();
        let b = TensorArchive::read(&path).unwrap();
        for i in 0..50 {
            let t = b.get(&format!("t{i}")).unwrap();
            assert_eq!(t.data, vec![i as f64; i % 7 + 1]);
        }
    }
}
