//! Binary checkpoint container.
//!
//! ```text
//! "DEFU"  u32 version
//! u32 len, config (TOML text)
//! u64 epoch
//! u8 has_optimizer [f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step]
//! u32 count, then per tensor:
//!     u32 len, name, u8 dtype, u8 rank, rank x u32 dims, little-endian payload
//! u32 CRC-32 of everything above
//! ```
//!
//! All integers are little-endian. Tensor names are parameter names,
//! `<bn>.running_mean` / `<bn>.running_var` for batch-norm statistics and
//! `adam.m/<param>` / `adam.v/<param>` for optimizer moments.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::{DType, Element, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DEFU";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<E> {
    pub model: Model<E>,
    pub optimizer: Option<Adam<E>>,
    pub epoch: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<E: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<E>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(E::DTYPE.tag());
    out.push(4);
    for d in t.shape().dims() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<E: Element>(model: &Model<E>, optimizer: Option<&Adam<E>>, epoch: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let config = model.config().to_toml();
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());

    let store = &model.store;
    let mut records: Vec<(String, &Tensor<E>)> = Vec::new();
    for p in store.params() {
        records.push((p.name.clone(), &p.value));
    }
    for b in store.buffers() {
        records.push((format!("{}.running_mean", b.name), &b.stats.mean));
        records.push((format!("{}.running_var", b.name), &b.stats.var));
    }
    match optimizer {
        Some(opt) => {
            out.push(1);
            let c = opt.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&opt.steps().to_le_bytes());
            for (&id, mo) in opt.moments() {
                records.push((format!("adam.m/{}", store.name(id)), &mo.m));
                records.push((format!("adam.v/{}", store.name(id)), &mo.v));
            }
        }
        None => out.push(0),
    }

    put_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        put_tensor(&mut out, &name, t);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("text field is not UTF-8".into()))
    }
}

fn read_tensor<E: Element>(r: &mut Reader<'_>) -> Result<(String, Tensor<E>)> {
    let name = r.string()?;
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype tag {tag}")))?;
    if dtype != E::DTYPE {
        return Err(Error::Format(format!("`{name}` is {dtype}, expected {}", E::DTYPE)));
    }
    let rank = r.u8()? as usize;
    if rank != 4 {
        return Err(Error::Format(format!("`{name}` has rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let shape = Shape::from(dims);
    let bytes = r.take(shape.len() * dtype.size())?;
    let data = bytes.chunks_exact(dtype.size()).map(E::read_le).collect();
    let t = Tensor::from_vec(shape, data).map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
    Ok((name, t))
}

fn take_tensor<E: Element>(
    tensors: &mut BTreeMap<String, Tensor<E>>,
    name: String,
    expected: Shape,
) -> Result<Tensor<E>> {
    let t = tensors
        .remove(&name)
        .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
    if t.shape() != expected {
        return Err(Error::Format(format!(
            "tensor `{name}` has shape {} but the configured model expects {expected}",
            t.shape()
        )));
    }
    Ok(t)
}

pub fn decode_checkpoint<E: Element>(bytes: &[u8]) -> Result<Checkpoint<E>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DEFU magic bytes".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity("file is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity(
            "checksum mismatch (truncated or corrupted file)".into(),
        ));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let config = ModelConfig::from_toml(&r.string()?)?;
    let epoch = r.u64()?;
    let opt_header = match r.u8()? {
        0 => None,
        1 => {
            let cfg = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            Some((cfg, r.u64()?))
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor::<E>(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after tensor records".into()));
    }

    let mut model = Model::<E>::build(&config, 0)?;
    let ids: Vec<_> = model.store.shapes().collect();
    for &(id, shape) in &ids {
        let t = take_tensor(&mut tensors, model.store.name(id).to_string(), shape)?;
        model.store.set(id, t)?;
    }
    for i in 0..model.store.buffers().len() {
        let name = model.store.buffers()[i].name.clone();
        let shape = model.store.buffers()[i].stats.mean.shape();
        let mean = take_tensor(&mut tensors, format!("{name}.running_mean"), shape)?;
        let var = take_tensor(&mut tensors, format!("{name}.running_var"), shape)?;
        let stats = model.store.stats_mut(i);
        stats.mean = mean;
        stats.var = var;
    }
    let optimizer = match opt_header {
        None => None,
        Some((cfg, step)) => {
            let mut moments = BTreeMap::new();
            for &(id, shape) in &ids {
                let name = model.store.name(id).to_string();
                let m_key = format!("adam.m/{name}");
                if !tensors.contains_key(&m_key) {
                    continue;
                }
                let m = take_tensor(&mut tensors, m_key, shape)?;
                let v = take_tensor(&mut tensors, format!("adam.v/{name}"), shape)?;
                moments.insert(id, Moments { m, v });
            }
            Some(Adam::from_state(cfg, step, moments))
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{name}`")));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        epoch,
    })
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint<E: Element>(
    model: &Model<E>,
    optimizer: Option<&Adam<E>>,
    epoch: u64,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, epoch);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<Checkpoint<E>> {
    decode_checkpoint(&std::fs::read(path)?)
}
