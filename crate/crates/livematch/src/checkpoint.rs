//! Binary checkpoint: model parameters, optimizer state and run metadata.
//!
//! Layout, all integers `u64` and all reals `f64`, little-endian:
//!
//! ```text
//! magic "LMCKPT\0\0", version
//! vocab checksum, vocab size, vision dim
//! config text (length-prefixed UTF-8, `key = value` lines)
//! epoch, lr, best flag (u8) + best, history length + values
//! parameter count; per parameter: name, rank, extents, values
//! optimizer step; first moments; second moments (parameter order)
//! ```

use std::fs;
use std::path::Path;

use livematch_core::training::{OptimizerState, TrainState};
use livematch_core::{MatchingModel, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LMCKPT\0\0";
const VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab_checksum: u64,
    pub model: MatchingModel,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn values(&mut self, t: &Tensor) {
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Data("checkpoint size field overflows".into()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }

    fn values_into(&mut self, dst: &mut [f64]) -> Result<()> {
        for x in dst {
            *x = self.f64()?;
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u64(VERSION);
        w.u64(self.vocab_checksum);
        let mc = self.model.config();
        w.u64(mc.vocab_size as u64);
        w.u64(mc.vision_dim as u64);
        w.bytes(self.config.to_text().as_bytes());
        let s = &self.state;
        w.u64(s.epoch as u64);
        w.f64(s.lr);
        w.0.push(u8::from(s.best.is_some()));
        w.f64(s.best.unwrap_or(0.0));
        w.u64(s.history.len() as u64);
        for &h in &s.history {
            w.f64(h);
        }
        let params = self.model.params();
        w.u64(params.len() as u64);
        for (_, p) in params.iter() {
            w.bytes(p.name.as_bytes());
            w.u64(p.value.shape().len() as u64);
            for &e in p.value.shape() {
                w.u64(e as u64);
            }
            w.values(&p.value);
        }
        w.u64(s.optimizer.step);
        for t in s.optimizer.m.iter().chain(&s.optimizer.v) {
            w.values(t);
        }
        w.0
    }

    /// Rebuilds the model from the stored config, then overwrites every
    /// parameter; names and shapes must match the rebuilt layout.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u64()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let vocab_checksum = r.u64()?;
        let vocab_size = r.usize()?;
        let vision_dim = r.usize()?;
        let text = r.string()?;
        let config = RunConfig::resolve(&[], Some((Path::new("<checkpoint>"), &text)), &[])
            .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let epoch = r.usize()?;
        let lr = r.f64()?;
        let has_best = r.take(1)?[0] != 0;
        let best = r.f64()?;
        let n_hist = r.usize()?;
        let history = (0..n_hist).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;

        let mut model = MatchingModel::new(config.model_config(vocab_size, vision_dim), 0)?;
        let n_params = r.usize()?;
        if n_params != model.params().len() {
            return Err(Error::Data(format!(
                "checkpoint holds {n_params} parameters, model has {}",
                model.params().len()
            )));
        }
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let name = r.string()?;
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let p = model.params_mut().get_mut(id);
            if name != p.name || shape != p.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} {shape:?} does not match {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            r.values_into(p.value.data_mut())?;
        }
        let mut optimizer = OptimizerState::new(model.params());
        optimizer.step = r.u64()?;
        for t in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
            r.values_into(t.data_mut())?;
        }
        if r.pos != buf.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            vocab_checksum,
            model,
            state: TrainState {
                epoch,
                lr,
                optimizer,
                history,
                best: has_best.then_some(best),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
