//! Checkpoint file format: the magic string `SYMB1`, a model-dimensions
//! header, then one record per parameter (name length, name bytes, rank,
//! dims, little-endian f32 payload). Round-trips are bit-exact. The
//! reader treats input as untrusted: every length is validated against
//! the remaining buffer before any allocation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, NormStyle, ParameterStore};

pub const MAGIC: &[u8; 5] = b"SYMB1";

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_DIM: u32 = 1 << 24;
const MAX_NUMEL: u64 = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub records: Vec<CheckpointRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    /// Snapshot of a store. Values are narrowed to f32; in single
    /// precision storage this is lossless.
    pub fn from_store(dims: &ModelDims, store: &ParameterStore) -> Checkpoint {
        let records = store
            .iter()
            .map(|(name, p)| CheckpointRecord {
                name: name.clone(),
                shape: p.shape.clone(),
                data: p.values.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Checkpoint {
            dims: dims.clone(),
            records,
        }
    }

    /// Writes values back into a store with an identical schema.
    pub fn load_into(&self, store: &mut ParameterStore) -> Result<()> {
        if let Some(diff) = self.schema_diff_names(&store.names()) {
            return Err(Error::Checkpoint(diff));
        }
        for rec in &self.records {
            let p = store.get_mut(&rec.name);
            if p.shape != rec.shape {
                return Err(Error::Checkpoint(format!(
                    "shape of {} differs: checkpoint {:?}, store {:?}",
                    rec.name, rec.shape, p.shape
                )));
            }
            for (slot, &v) in p.values.iter_mut().zip(rec.data.iter()) {
                *slot = v as f64;
            }
        }
        Ok(())
    }

    fn schema_diff_names(&self, store_names: &[String]) -> Option<String> {
        let mine: Vec<&str> = self.records.iter().map(|r| r.name.as_str()).collect();
        let theirs: Vec<&str> = store_names.iter().map(|s| s.as_str()).collect();
        for (a, b) in mine.iter().zip(theirs.iter()) {
            if a != b {
                return Some(format!(
                    "schema mismatch at parameter {a:?} (store has {b:?})"
                ));
            }
        }
        if mine.len() != theirs.len() {
            return Some(format!(
                "schema mismatch: checkpoint has {} parameters, store has {}",
                mine.len(),
                theirs.len()
            ));
        }
        None
    }

    /// First differing parameter name/shape against another checkpoint.
    pub fn schema_diff(&self, other: &Checkpoint) -> Option<String> {
        for (a, b) in self.records.iter().zip(other.records.iter()) {
            if a.name != b.name {
                return Some(format!("parameter {:?} vs {:?}", a.name, b.name));
            }
            if a.shape != b.shape {
                return Some(format!(
                    "parameter {:?}: shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                ));
            }
        }
        if self.records.len() != other.records.len() {
            return Some(format!(
                "record counts differ: {} vs {}",
                self.records.len(),
                other.records.len()
            ));
        }
        None
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.d_model as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.n_heads as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.d_ffn as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.max_len as u32).to_le_bytes());
        out.extend_from_slice(&self.dims.dropout_p.to_le_bytes());
        out.push(match self.dims.norm_style {
            NormStyle::Pre => 0,
            NormStyle::Post => 1,
        });
        for rec in &self.records {
            out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let d_model = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let d_ffn = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let max_len = r.u32()? as usize;
        let dropout_p = r.f64()?;
        let norm_style = match r.u8()? {
            0 => NormStyle::Pre,
            1 => NormStyle::Post,
            x => return Err(Error::Checkpoint(format!("unknown norm style tag {x}"))),
        };
        let dims = ModelDims {
            d_model,
            n_heads,
            d_ffn,
            vocab_size,
            max_len,
            dropout_p,
            norm_style,
        };
        let mut records = Vec::new();
        while !r.done() {
            let name_len = r.u32()?;
            if name_len > MAX_NAME_LEN {
                return Err(Error::Checkpoint(format!(
                    "name length {name_len} too large"
                )));
            }
            let name = std::str::from_utf8(r.take(name_len as usize)?)
                .map_err(|e| Error::Checkpoint(format!("parameter name not utf-8: {e}")))?
                .to_string();
            let rank = r.u32()?;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!(
                    "rank {rank} too large for {name:?}"
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u32()?;
                if d == 0 || d > MAX_DIM {
                    return Err(Error::Checkpoint(format!(
                        "dimension {d} out of range for {name:?}"
                    )));
                }
                numel = numel.saturating_mul(d as u64);
                shape.push(d as usize);
            }
            if numel > MAX_NUMEL {
                return Err(Error::Checkpoint(format!(
                    "payload of {name:?} too large: {numel} elements"
                )));
            }
            let payload = r.take(numel as usize * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(CheckpointRecord { name, shape, data });
        }
        Ok(Checkpoint { dims, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&buf)
    }
}
