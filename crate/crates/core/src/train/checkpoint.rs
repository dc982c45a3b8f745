//! Checkpoint file:
//!
//! ```text
//! magic "S2STCKPT", u32 version
//! 4 sections, each: 4-byte tag, u64 payload length, payload
//!   CONF  JSON {config, src_cmvn, tgt_cmvn}
//!   PARM  parameter set in the engine's binary format
//!   OPTM  u64 step, u32 count, per parameter: u32 n, n x f64 m, n x f64 v
//!   META  JSON {stage, step, seed, fingerprint}
//! ```
//! Integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use ndiff::checkpoint::{params_to_bytes, read_params};
use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, Result, StageKind, TrainError};
use crate::audio::CmvnStats;
use crate::model::{param_shapes, ModelConfig, S2stModel};

pub const CKPT_MAGIC: &[u8; 8] = b"S2STCKPT";
const VERSION: u32 = 1;

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: S2stModel,
    pub opt: OptimizerState,
    pub stage: StageKind,
    /// Last completed step of `stage`.
    pub step: u64,
    /// Stage seed; per-step randomness derives from `(seed, step)`.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Conf {
    config: ModelConfig,
    src_cmvn: CmvnStats,
    tgt_cmvn: CmvnStats,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    stage: StageKind,
    step: u64,
    seed: u64,
    fingerprint: String,
}

fn section(w: &mut impl Write, tag: &[u8; 4], payload: &[u8]) -> std::io::Result<()> {
    w.write_all(tag)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)
}

pub fn write_checkpoint(ck: &Checkpoint, w: &mut impl Write) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let conf = Conf {
        config: ck.model.config.clone(),
        src_cmvn: ck.model.src_cmvn.clone(),
        tgt_cmvn: ck.model.tgt_cmvn.clone(),
    };
    section(w, b"CONF", &serde_json::to_vec(&conf).expect("config serialises"))?;
    section(w, b"PARM", &params_to_bytes(&ck.model.params))?;
    let mut opt = Vec::new();
    opt.extend_from_slice(&ck.opt.step.to_le_bytes());
    opt.extend_from_slice(&(ck.opt.m.len() as u32).to_le_bytes());
    for (m, v) in ck.opt.m.iter().zip(&ck.opt.v) {
        opt.extend_from_slice(&(m.numel() as u32).to_le_bytes());
        for x in m.data().iter().chain(v.data()) {
            opt.extend_from_slice(&x.to_le_bytes());
        }
    }
    section(w, b"OPTM", &opt)?;
    let meta = Meta {
        stage: ck.stage,
        step: ck.step,
        seed: ck.seed,
        fingerprint: ck.model.config.fingerprint(),
    };
    section(w, b"META", &serde_json::to_vec(&meta).expect("meta serialises"))?;
    Ok(())
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(ck, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn truncated(what: &str) -> TrainError {
    TrainError::Checkpoint(format!("truncated while reading {what}"))
}

fn read_section(r: &mut impl Read, tag: &[u8; 4]) -> Result<Vec<u8>> {
    let name = String::from_utf8_lossy(tag).into_owned();
    let mut t = [0u8; 4];
    r.read_exact(&mut t).map_err(|_| truncated(&name))?;
    if &t != tag {
        return Err(TrainError::Checkpoint(format!(
            "expected section {name}, found {:?}",
            String::from_utf8_lossy(&t)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| truncated(&name))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(truncated(&name));
    }
    Ok(payload)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(truncated("OPTM"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Reads a checkpoint; with `expected_fingerprint` set, a checkpoint of any
/// other model config is refused.
pub fn read_checkpoint(r: &mut impl Read, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver).map_err(|_| truncated("version"))?;
    if u32::from_le_bytes(ver) != VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {}", u32::from_le_bytes(ver))));
    }
    let corrupt = |what: &str, e: String| TrainError::Checkpoint(format!("{what}: {e}"));
    let conf: Conf = serde_json::from_slice(&read_section(r, b"CONF")?).map_err(|e| corrupt("CONF", e.to_string()))?;
    let parm = read_section(r, b"PARM")?;
    let params = read_params(&mut parm.as_slice())?;
    let optm = read_section(r, b"OPTM")?;
    let meta: Meta = serde_json::from_slice(&read_section(r, b"META")?).map_err(|e| corrupt("META", e.to_string()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TrainError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }

    let fingerprint = conf.config.fingerprint();
    if meta.fingerprint != fingerprint {
        return Err(TrainError::Checkpoint("stored fingerprint does not match stored config".into()));
    }
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            return Err(TrainError::FingerprintMismatch {
                expected: expected.to_string(),
                found: fingerprint,
            });
        }
    }
    conf.config.validate()?;
    let shapes = param_shapes(&conf.config);
    if shapes.len() != params.len() {
        return Err(TrainError::Checkpoint("parameter count does not fit the stored config".into()));
    }
    for ((name, shape, _), (_, got_name, got)) in shapes.iter().zip(params.iter()) {
        if name != got_name || shape.as_slice() != got.shape() {
            return Err(TrainError::Checkpoint(format!("parameter {got_name} does not fit the stored config")));
        }
    }

    let mut c = Cursor(&optm);
    let step = c.u64()?;
    let count = c.u32()? as usize;
    if count != params.len() {
        return Err(TrainError::Checkpoint(format!("{count} moment pairs for {} parameters", params.len())));
    }
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for (_, name, t) in params.iter() {
        let n = c.u32()? as usize;
        if n != t.numel() {
            return Err(TrainError::Checkpoint(format!("moment size mismatch for {name}")));
        }
        m.push(Tensor::new(t.shape().to_vec(), c.f64s(n)?)?);
        v.push(Tensor::new(t.shape().to_vec(), c.f64s(n)?)?);
    }
    if !c.0.is_empty() {
        return Err(TrainError::Checkpoint("trailing bytes in OPTM".into()));
    }
    Ok(Checkpoint {
        model: S2stModel {
            config: conf.config,
            params,
            src_cmvn: conf.src_cmvn,
            tgt_cmvn: conf.tgt_cmvn,
        },
        opt: OptimizerState { step, m, v },
        stage: meta.stage,
        step: meta.step,
        seed: meta.seed,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice(), expected_fingerprint)
}
