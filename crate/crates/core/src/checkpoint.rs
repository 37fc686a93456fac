//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PDASCKPT`, a little-endian `u64` header length,
//! that many bytes of UTF-8 JSON ([`CheckpointHeader`]), then every parameter
//! buffer as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PDASCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: u64,
    /// Model configuration, opaque at this layer.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: serde_json::Value,
    step: u64,
    params: &ParamSet,
) -> Result<()> {
    let header = CheckpointHeader {
        dtype: "f64".into(),
        step,
        config,
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in params.tensors() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, ParamSet)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }
    let mut params = ParamSet::default();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, params))
}

pub fn save(path: &Path, config: serde_json::Value, step: u64, params: &ParamSet) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), config, step, params)
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), step in any::<u64>()) {
            let mut p = ParamSet::default();
            p.push("a", Tensor::new(vec![values.len()], values.clone()).unwrap());
            p.push("b.w", Tensor::new(vec![1, 1], vec![-0.0]).unwrap());
            let cfg = serde_json::json!({"embed_dim": 8});
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, cfg.clone(), step, &p).unwrap();
            let (h, q) = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(h.step, step);
            prop_assert_eq!(&h.config, &cfg);
            for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            let mut again = Vec::new();
            write_checkpoint(&mut again, h.config.clone(), h.step, &q).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut p = ParamSet::default();
        p.push("w", Tensor::zeros(&[3]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, serde_json::Value::Null, 0, &p).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
