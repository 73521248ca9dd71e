//! Binary checkpoint container shared by the model crates. Little-endian
//! throughout; the caller supplies the 4-byte magic and an opaque spec
//! payload. Round-trips are bit-exact.
//!
//! Layout: magic, version u32, spec length u32 + spec bytes, parameter count
//! u32, per parameter { name length u32, name bytes, trainable u8, rank u32,
//! extents u32..., f32 payload }, optimizer flag u8, optional optimizer
//! section { step u64, lr f64, beta1 f64, beta2 f64, epsilon f64,
//! per-parameter first- and second-moment f32 payloads }.

use std::io::{Read, Write};

use crate::adam::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::{NumError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct CheckpointBody {
    pub version: u32,
    pub spec_bytes: Vec<u8>,
    pub params: ParamSet<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(magic: &[u8; 4], body: &CheckpointBody) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    put_u32(&mut out, body.version);
    put_u32(&mut out, body.spec_bytes.len() as u32);
    out.extend_from_slice(&body.spec_bytes);
    put_u32(&mut out, body.params.len() as u32);
    for p in body.params.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        put_u32(&mut out, p.value.shape().len() as u32);
        for &e in p.value.shape() {
            put_u32(&mut out, e as u32);
        }
        put_f32s(&mut out, p.value.data());
    }
    match &body.optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            out.extend_from_slice(&st.config.learning_rate.to_le_bytes());
            out.extend_from_slice(&st.config.beta1.to_le_bytes());
            out.extend_from_slice(&st.config.beta2.to_le_bytes());
            out.extend_from_slice(&st.config.epsilon.to_le_bytes());
            for t in &st.m {
                put_f32s(&mut out, t.data());
            }
            for t in &st.v {
                put_f32s(&mut out, t.data());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Checkpoint(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<CheckpointBody> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let found = c.take(4)?;
    if found != magic {
        return Err(NumError::Checkpoint(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        )));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let spec_len = c.u32()? as usize;
    let spec_bytes = c.take(spec_len)?.to_vec();
    let n_params = c.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| NumError::Checkpoint(format!("bad parameter name: {e}")))?;
        let trainable = c.u8()? != 0;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = c.f32s(numel)?;
        let id = params.add(&name, Tensor::new(shape, data))?;
        params.get_mut(id).trainable = trainable;
    }
    let optimizer = if c.u8()? == 1 {
        let step = c.u64()?;
        let config = AdamConfig {
            learning_rate: c.f64()?,
            beta1: c.f64()?,
            beta2: c.f64()?,
            epsilon: c.f64()?,
        };
        let mut st = AdamState::new(&params, config);
        st.step = step;
        for t in &mut st.m {
            let n = t.numel();
            *t = Tensor::new(t.shape().to_vec(), c.f32s(n)?);
        }
        for t in &mut st.v {
            let n = t.numel();
            *t = Tensor::new(t.shape().to_vec(), c.f32s(n)?);
        }
        Some(st)
    } else {
        None
    };
    if c.pos != bytes.len() {
        return Err(NumError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(CheckpointBody {
        version,
        spec_bytes,
        params,
        optimizer,
    })
}

pub fn save(path: &std::path::Path, magic: &[u8; 4], body: &CheckpointBody) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(magic, body))?;
    Ok(())
}

pub fn load(path: &std::path::Path, magic: &[u8; 4]) -> Result<CheckpointBody> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(magic, &bytes)
}
