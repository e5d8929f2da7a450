//! Little-endian checkpoint file:
//!
//! ```text
//! "AFRA" u32:version u32:len config-text
//! u32:count { u32:len name u32:ndim u64:dim.. u64:n f64:value.. }
//! u8:has_train [ u64:epoch f64:best u64:adam_step { u64:n f64:m.. u64:n f64:v.. } per param ]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AgentConfig, AgentModel};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFRA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and progress state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: u64,
    pub best_metric: f64,
    pub adam_step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: AgentConfig,
    pub params: Vec<(String, Tensor)>,
    pub train: Option<TrainState>,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    put_u64(b, xs.len() as u64);
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Format(format!(
                "checkpoint truncated: blob of {n} values exceeds file"
            )));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &AgentModel, train: Option<TrainState>) -> Self {
        Self {
            config: model.cfg.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value().clone()))
                .collect(),
            train,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        put_str(&mut b, &self.config.to_text());
        put_u32(&mut b, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut b, name);
            put_u32(&mut b, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut b, d as u64);
            }
            put_f64s(&mut b, t.data());
        }
        match &self.train {
            None => b.push(0),
            Some(s) => {
                b.push(1);
                put_u64(&mut b, s.epoch);
                b.extend_from_slice(&s.best_metric.to_le_bytes());
                put_u64(&mut b, s.adam_step);
                for (m, v) in s.m.iter().zip(&s.v) {
                    put_f64s(&mut b, m);
                    put_f64s(&mut b, v);
                }
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = AgentConfig::from_text(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            params.push((name, t));
        }
        let train = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u64()?;
                let best_metric = r.f64()?;
                let adam_step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..count {
                    m.push(r.f64s()?);
                    v.push(r.f64s()?);
                }
                Some(TrainState {
                    epoch,
                    best_metric,
                    adam_step,
                    m,
                    v,
                })
            }
            f => return Err(Error::Format(format!("bad training-state flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                buf.len() - r.pos
            )));
        }
        Ok(Self { config, params, train })
    }

    /// Builds the model from the stored configuration and fills in every parameter.
    pub fn into_model(self) -> Result<(AgentModel, Option<TrainState>)> {
        let mut model = AgentModel::new(self.config)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in self.params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            model.store.set(id, t)?;
        }
        Ok((model, self.train))
    }
}

pub fn save_checkpoint(model: &AgentModel, train: Option<TrainState>, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_model(model, train).to_bytes();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AgentModel, Option<TrainState>)> {
    Checkpoint::from_bytes(&fs::read(path)?)?.into_model()
}
