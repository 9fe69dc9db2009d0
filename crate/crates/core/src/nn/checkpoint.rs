//! Binary tensor container.
//!
//! Layout (little endian): magic, `u32` version, schema hash, metadata JSON,
//! then `u32` tensor count followed by `(name, u32 ndim, u64 dims..., f32
//! data)` records. Strings are `u32` length-prefixed UTF-8.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Params;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOARMCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema_hash: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(schema_hash: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            schema_hash: schema_hash.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params`, names prefixed with `prefix`.
    pub fn push_params<P: Params>(&mut self, prefix: &str, params: &P) {
        for ((name, shape), data) in params.shapes().into_iter().zip(params.tensors()) {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}{name}"),
                shape,
                data: data.iter().map(|&v| v as f32).collect(),
            });
        }
    }

    /// Fills `params` from tensors named `prefix + name`; shapes must match.
    pub fn load_params<P: Params>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let shapes = params.shapes();
        for ((name, shape), dst) in shapes.into_iter().zip(params.tensors_mut()) {
            let full = format!("{prefix}{name}");
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            for (d, &s) in dst.iter_mut().zip(&t.data) {
                *d = s as f64;
            }
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(w, &self.schema_hash)?;
        write_str(w, &self.metadata.to_string())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            write_str(w, &t.name)?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let schema_hash = read_str(r).map_err(bad)?;
        let metadata = serde_json::from_str(&read_str(r).map_err(bad)?)?;
        let n = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = read_str(r).map_err(bad)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(bad)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            schema_hash,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 28 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "string too long"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Backbone, BackboneConfig};
    use crate::rng::Stream;

    #[test]
    fn roundtrip_through_bytes() {
        let cfg = BackboneConfig { dim: 3, hidden: vec![4], time_dim: 4 };
        let b = Backbone::new(cfg, &mut Stream::new(2));
        let mut ck = Checkpoint::new("abc", serde_json::json!({"k": 1}));
        ck.push_params("", &b);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut b2 = b.zeros_like();
        back.load_params("", &mut b2).unwrap();
        for (x, y) in b.tensors().iter().zip(b2.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert_eq!(*u as f32, *v as f32);
            }
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::read_from(&mut &b"nonsense"[..]).is_err());
        let mut ck = Checkpoint::new("h", serde_json::json!(null));
        ck.tensors.push(NamedTensor { name: "x".into(), shape: vec![2], data: vec![1.0, 2.0] });
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = BackboneConfig { dim: 3, hidden: vec![4], time_dim: 4 };
        let b = Backbone::new(cfg.clone(), &mut Stream::new(2));
        let mut ck = Checkpoint::new("h", serde_json::json!(null));
        ck.push_params("", &b);
        let mut other = Backbone::new(BackboneConfig { hidden: vec![5], ..cfg }, &mut Stream::new(0));
        assert!(ck.load_params("", &mut other).is_err());
    }
}
