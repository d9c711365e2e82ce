//! Binary checkpoint archive.
//!
//! ```text
//! "CANF" | version u32 | config_len u32 | config text
//! n_entries u32 | entries: name_len u16, name, dtype u8, ndim u8, dims u64×ndim, offset u64, nbytes u64
//! payload (little-endian scalars; offsets are relative to its start)
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CANF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// A parsed archive: config snapshot, entry table and raw payload.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub entries: Vec<Entry>,
    payload: Vec<u8>,
}

pub fn encode<T: Element>(model: &Model<T>, config: &RunConfig) -> Vec<u8> {
    encode_tensors(&config.serialize(), model.params.iter().map(|(_, name, t)| (name, t)))
}

/// Archive of arbitrary named tensors with a config snapshot.
pub fn encode_tensors<'a, T: Element + 'a>(
    config_text: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let nbytes = (t.numel() * T::DTYPE.size()) as u64;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&nbytes.to_le_bytes());
        for &v in t.data() {
            v.to_le_bytes_into(&mut payload);
        }
    }
    out.extend_from_slice(&payload);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn save<T: Element>(model: &Model<T>, config: &RunConfig, path: &Path) -> Result<()> {
    write_file(path, &encode(model, config))
}

pub fn save_tensors<T: Element>(config_text: &str, tensors: &[(&str, &Tensor<T>)], path: &Path) -> Result<()> {
    write_file(path, &encode_tensors(config_text, tensors.iter().copied()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!("archive truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let clen = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(clen, "config")?)
        .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?
        .to_string();
    let n = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    let mut names = HashSet::new();
    for _ in 0..n {
        let nlen = r.u16("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "entry name")?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Format(format!("entry `{name}` has unknown dtype code {code}")))?;
        let ndim = r.u8("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")?;
        let nbytes = r.u64("size")?;
        let expect = shape.iter().try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expect != Some(nbytes) || shape.iter().any(|&d| d == 0) {
            return Err(Error::Integrity(format!("entry `{name}`: shape {shape:?} does not match {nbytes} bytes")));
        }
        if !names.insert(name.clone()) {
            return Err(Error::Integrity(format!("entry `{name}` appears twice")));
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
            nbytes,
        });
    }
    let payload = bytes[r.pos..].to_vec();
    let mut spans: Vec<(u64, u64, &str)> = entries.iter().map(|e| (e.offset, e.nbytes, e.name.as_str())).collect();
    spans.sort_unstable();
    let mut end = 0u64;
    for (off, len, name) in spans {
        if off < end {
            return Err(Error::Integrity(format!("entry `{name}` overlaps its predecessor")));
        }
        end = off
            .checked_add(len)
            .ok_or_else(|| Error::Integrity(format!("entry `{name}` has an invalid offset")))?;
    }
    if end > payload.len() as u64 {
        return Err(Error::Integrity(format!(
            "payload truncated: need {end} bytes, found {}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        config_text,
        entries,
        payload,
    })
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn config(&self, overrides: &[String]) -> Result<RunConfig> {
        parse_config(&self.config_text, overrides)
    }

    pub fn tensor<T: Element>(&self, entry: &Entry) -> Result<Tensor<T>> {
        if entry.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "entry `{}` is {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let start = entry.offset as usize;
        let bytes = &self.payload[start..start + entry.nbytes as usize];
        let data = bytes.chunks_exact(T::DTYPE.size()).map(T::from_le_slice).collect();
        Tensor::new(entry.shape.clone(), data)
    }

    /// Copies every entry into `model`; each model parameter must appear
    /// exactly once with a matching shape.
    pub fn load_into<T: Element>(&self, model: &mut Model<T>) -> Result<()> {
        let mut staged = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = model
                .params
                .id(&e.name)
                .ok_or_else(|| Error::Integrity(format!("entry `{}` is not a parameter of this model", e.name)))?;
            let have = model.params.get(id).shape();
            if have != e.shape.as_slice() {
                return Err(Error::shape(format!(
                    "entry `{}` has shape {:?} but the model expects {have:?}",
                    e.name, e.shape
                )));
            }
            staged.push((id, self.tensor::<T>(e)?));
        }
        if staged.len() != model.params.len() {
            let present: HashSet<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
            let missing = model
                .params
                .iter()
                .find(|(_, n, _)| !present.contains(n))
                .map(|(_, n, _)| n.to_string())
                .unwrap_or_default();
            return Err(Error::Integrity(format!("parameter `{missing}` missing from archive")));
        }
        for (id, t) in staged {
            model.params.set(id, t)?;
        }
        Ok(())
    }

    /// Builds the model described by the stored config (plus `overrides`)
    /// and loads the weights into it.
    pub fn into_model<T: Element>(&self, overrides: &[String]) -> Result<(RunConfig, Model<T>)> {
        let cfg = self.config(overrides)?;
        let mut model = build_model::<T>(&cfg.model, cfg.seed)?;
        self.load_into(&mut model)?;
        Ok((cfg, model))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
