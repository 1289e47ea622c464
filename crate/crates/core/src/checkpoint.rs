//! Binary parameter store: a magic tag, a JSON metadata block, then named
//! little-endian `f64` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"MFCCCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_module<M: Module + ?Sized>(module: &M, metadata: serde_json::Value) -> Self {
        let mut tensors = Vec::new();
        module.visit(&mut |p| {
            let t = Tensor::from_parts(p.value.shape().to_vec(), p.value.data().to_vec());
            tensors.push((p.name.clone(), t));
        });
        Self { metadata, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into every parameter of `module`; every
    /// parameter must be present with a matching shape.
    pub fn apply_to<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut failure = None;
        module.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match self.get(&p.name) {
                None => failure = Some(format!("missing parameter {}", p.name)),
                Some(t) if t.shape() != p.value.shape() => {
                    failure = Some(format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ))
                }
                Some(t) => {
                    p.value.data_mut().copy_from_slice(t.data());
                    p.value.grad = None;
                }
            }
        });
        match failure {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.metadata.to_string();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = take(&mut r, meta_len)?;
        let metadata = serde_json::from_slice(meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = read_u64(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
