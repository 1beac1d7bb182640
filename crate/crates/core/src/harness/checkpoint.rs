//! SWCK checkpoints (little-endian):
//! magic "SWCK" · version u32 · config text (u32 length + UTF-8) · step u64 ·
//! optimizer step u64 · tensor count u32 · per tensor (name length u32, name,
//! rank u32, dims u32[rank], f32 payload) · CRC-32 of everything before it.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::optim::OptimState;

pub const SWCK_MAGIC: &[u8; 4] = b"SWCK";
pub const SWCK_VERSION: u32 = 1;
const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";
/// Parameter name prefix of the pre-training heads, dropped for fine-tuning.
pub const HEADS_PREFIX: &str = "heads.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training steps.
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optim: Option<OptimState<f32>>,
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return fmt_err(self.pos, format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, step: u64, store: &ParamStore<f32>, optim: Option<&OptimState<f32>>) -> Self {
        Self {
            config: config.clone(),
            step,
            params: store.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optim: optim.cloned(),
        }
    }

    /// Parameters whose names do not start with [`HEADS_PREFIX`].
    pub fn without_heads(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().filter(|(n, _)| !n.starts_with(HEADS_PREFIX)).cloned().collect()
    }

    /// Copy parameter values (and optimizer state, when present) into a
    /// store built from the same configuration.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<Option<OptimState<f32>>> {
        let n = store.load_matching(&self.params, "")?;
        if n != store.len() {
            return Err(Error::Config {
                field: "checkpoint".into(),
                msg: format!("holds {n} of the model's {} parameters", store.len()),
            });
        }
        Ok(self.optim.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(SWCK_MAGIC);
        out.extend_from_slice(&SWCK_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.optim.as_ref().map_or(0, |o| o.step).to_le_bytes());
        let mut table: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(o) = &self.optim {
            if o.m.len() != self.params.len() || o.v.len() != self.params.len() {
                return Err(Error::Shape("optimizer state does not match parameter count".into()));
            }
            for ((name, _), (m, v)) in self.params.iter().zip(o.m.iter().zip(&o.v)) {
                table.push((format!("{MOMENT1}{name}"), m));
                table.push((format!("{MOMENT2}{name}"), v));
            }
        }
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, t) in table {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return fmt_err(bytes.len(), "truncated header");
        }
        if &bytes[0..4] != SWCK_MAGIC {
            return fmt_err(0, "bad magic, expected \"SWCK\"");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SWCK_VERSION {
            return fmt_err(4, format!("unsupported checkpoint version {version}"));
        }
        if bytes.len() < 12 {
            return fmt_err(bytes.len(), "truncated before checksum");
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return fmt_err(body.len(), "checksum mismatch (corrupted or truncated)");
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|_| Error::Format { offset: at as u64, msg: "config text is not UTF-8".into() })?;
        let config = RunConfig::from_text(text)?;
        let step = r.u64("step")?;
        let optim_step = r.u64("optimizer step")?;
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let n = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::Format { offset: at as u64, msg: "tensor name is not UTF-8".into() })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().product::<usize>();
            let at = r.pos;
            let data = r
                .take(numel * 4, "tensor payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format { offset: at as u64, msg: e.to_string() })?;
            if let Some(p) = name.strip_prefix(MOMENT1) {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                v.push((p.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != body.len() {
            return fmt_err(r.pos, "trailing bytes after tensor table");
        }
        let optim = if m.is_empty() {
            None
        } else {
            let ordered = |xs: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
                if xs.len() != params.len() || xs.iter().zip(&params).any(|((a, _), (b, _))| a != b) {
                    return fmt_err(0, "optimizer moments do not match the parameter table");
                }
                Ok(xs.into_iter().map(|(_, t)| t).collect())
            };
            Some(OptimState { m: ordered(m)?, v: ordered(v)?, step: optim_step })
        };
        Ok(Self { config, step, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
