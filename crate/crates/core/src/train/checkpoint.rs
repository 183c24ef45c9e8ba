//! Binary checkpoint bundle.
//!
//! Layout (little-endian): magic `DSMK`, `u32` version, then five sections
//! each prefixed by a `u64` byte length: config text (TOML), weights,
//! optimizer, EMA, RNG. Tensors are written as `u32` ndim, `u64` extents
//! and raw `f64` values; the weight table also carries `u32`-length names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::DiTMoE;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSMK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Parameters then routing-bias buffers, keyed by canonical name.
    pub weights: Vec<(String, Tensor)>,
    pub opt_step: u64,
    pub opt_m: Vec<Tensor>,
    pub opt_v: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigText {
    model: ModelConfig,
    train: TrainConfig,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_list(out: &mut Vec<u8>, ts: &[Tensor]) {
    out.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    ts.iter().for_each(|t| put_tensor(out, t));
}

fn section(out: &mut Vec<u8>, body: Vec<u8>) {
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
}

impl CheckpointBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = toml::to_string(&ConfigText {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
        })
        .map_err(|e| Error::Config(e.to_string()))?;

        let mut weights = Vec::new();
        weights.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for (name, t) in &self.weights {
            weights.extend_from_slice(&(name.len() as u32).to_le_bytes());
            weights.extend_from_slice(name.as_bytes());
            put_tensor(&mut weights, t);
        }
        let mut opt = self.opt_step.to_le_bytes().to_vec();
        put_list(&mut opt, &self.opt_m);
        put_list(&mut opt, &self.opt_v);
        let mut ema = Vec::new();
        put_list(&mut ema, &self.ema);
        let mut rng = self.step.to_le_bytes().to_vec();
        rng.extend_from_slice(&self.rng.seed);
        rng.extend_from_slice(&self.rng.stream.to_le_bytes());
        rng.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        for body in [text.into_bytes(), weights, opt, ema, rng] {
            section(&mut out, body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("missing DSMK magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut text = r.section()?;
        let mut weights = r.section()?;
        let mut opt = r.section()?;
        let mut ema = r.section()?;
        let mut rng = r.section()?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after last section".into()));
        }

        let text = std::str::from_utf8(text.take(text.buf.len())?)
            .map_err(|_| Error::CorruptCheckpoint("config section is not UTF-8".into()))?;
        let cfg: ConfigText =
            toml::from_str(text).map_err(|e| Error::CorruptCheckpoint(format!("config section: {e}")))?;

        let n = weights.u64()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = weights.u32()? as usize;
            let name = String::from_utf8(weights.take(len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?;
            table.push((name, weights.tensor()?));
        }
        let opt_step = opt.u64()?;
        let opt_m = opt.list()?;
        let opt_v = opt.list()?;
        let ema_list = ema.list()?;
        let step = rng.u64()?;
        let seed: [u8; 32] = rng.take(32)?.try_into().expect("32 bytes");
        let stream = rng.u64()?;
        let word_pos = u128::from_le_bytes(rng.take(16)?.try_into().expect("16 bytes"));
        for (name, s) in [("weights", &weights), ("optimizer", &opt), ("EMA", &ema), ("RNG", &rng)] {
            if s.pos != s.buf.len() {
                return Err(Error::CorruptCheckpoint(format!("{name} section has trailing bytes")));
            }
        }
        Ok(Self {
            model_config: cfg.model,
            train_config: cfg.train,
            weights: table,
            opt_step,
            opt_m,
            opt_v,
            ema: ema_list,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
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
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self) -> Result<Reader<'a>> {
        let len = self.u64()? as usize;
        Ok(Reader {
            buf: self.take(len)?,
            pos: 0,
        })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptCheckpoint(format!("tensor with {ndim} axes")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = self.u64()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::CorruptCheckpoint("tensor extent overflow".into()))?;
            shape.push(d);
        }
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    fn list(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Writes through a temporary sibling file so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and fully validates a checkpoint, including that its weight keys
/// match the stored model config.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bundle = CheckpointBundle::from_bytes(&bytes)?;
    let expected = DiTMoE::new(bundle.model_config.clone(), 0)?.state_names();
    crate::params::check_keys(&expected, bundle.weights.iter().map(|(n, _)| n.as_str()))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Trainer;

    fn bundle() -> CheckpointBundle {
        let mut m = crate::config::preset("dsmoe-tiny").unwrap();
        m.blocks = 2;
        m.hidden = 16;
        m.heads = 2;
        m.intermediate = 8;
        m.expert_spec = "S1E4A2".into();
        let t = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(m, t).unwrap();
        tr.step().unwrap();
        tr.to_bundle()
    }

    #[test]
    fn bytes_round_trip() {
        let b = bundle();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DSMK");
        let back = CheckpointBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = bundle().to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(97) {
            assert!(CheckpointBundle::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(CheckpointBundle::from_bytes(&longer).is_err());
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = bundle().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            CheckpointBundle::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }
}
