//! Flat named-parameter checkpoint file.
//!
//! ```text
//! "FSCKPT01"  count:u64
//! repeated:   name_len:u64 name:utf8 rank:u64 dims:u64×rank data:f64×numel
//! ```
//! All integers and floats little-endian. A split build and a monolithic
//! build write the same names, so a segment loads its slice of a full file.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SegmentModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSCKPT01";

pub fn write_params<W: Write>(mut w: W, params: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, segments: &[&SegmentModel]) -> Result<()> {
    let params: Vec<(String, Tensor)> = segments.iter().flat_map(|s| s.named_params()).collect();
    write_params(BufWriter::new(std::fs::File::create(path)?), &params)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    read_params(BufReader::new(std::fs::File::open(path)?))
}

impl SegmentModel {
    /// Load this segment's parameters from a checkpoint map, which may
    /// hold other segments' entries too.
    pub fn load_from(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        let mine: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let mut picked = Vec::with_capacity(mine.len());
        for name in &mine {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            picked.push((name, t));
        }
        self.set_params(picked)
    }
}
