//! Checkpoint container: "GBCAI" magic, format version, config digest, an
//! optional JSON metadata blob, then named parameter records with
//! little-endian f64 payloads. Round-trips bit-exactly.

use super::{ParamSet, Result, Tensor, TensorError};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"GBCAI";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    /// Free-form JSON metadata (policy kind, permutation, embedder config, ...).
    pub metadata: String,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(config_digest: [u8; 32], metadata: String, params: &ParamSet) -> Self {
        Checkpoint {
            config_digest,
            metadata,
            records: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn into_params(self) -> ParamSet {
        let mut params = ParamSet::new();
        for (name, t) in self.records {
            params.add(&name, t);
        }
        params
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_digest);
    let meta = ckpt.metadata.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(ckpt.records.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.records {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(5)?;
    if magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(cur.take(32)?);
    let meta_len = cur.u32()? as usize;
    let metadata = String::from_utf8(cur.take(meta_len)?.to_vec())
        .map_err(|_| TensorError::Format("metadata is not utf-8".into()))?;
    let n_records = cur.u32()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| TensorError::Format("record name is not utf-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let bytes: [u8; 8] = cur.take(8)?.try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        records.push((name, Tensor::new(shape, data)));
    }
    if cur.pos != buf.len() {
        return Err(TensorError::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint {
        config_digest,
        metadata,
        records,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b: [u8; 4] = self.take(4)?.try_into().unwrap();
        Ok(u32::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("gbc_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.bin");
        let ckpt = Checkpoint {
            config_digest: [7u8; 32],
            metadata: "{\"kind\":\"test\"}".to_string(),
            records: vec![
                (
                    "w".into(),
                    Tensor::new(vec![2, 3], vec![0.1, -2.5, 3e-300, f64::MIN_POSITIVE, 1.0, 0.0]),
                ),
                ("b".into(), Tensor::new(vec![1], vec![-0.0])),
            ],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_digest, ckpt.config_digest);
        assert_eq!(loaded.metadata, ckpt.metadata);
        assert_eq!(loaded.records.len(), 2);
        for ((n1, t1), (n2, t2)) in loaded.records.iter().zip(&ckpt.records) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            for (a, b) in t1.data.iter().zip(&t2.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("gbc_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
