//! Versioned binary checkpoints of named parameters and optimizer state.
//!
//! ```text
//! "NRCK" u32 version
//! u32 len, config hash bytes
//! u32 param_count
//! per param: u32 len, name, u8 group, u32 ndim, u64 dims..., f32 data...
//! optimizer: f64 lr beta1 beta2 eps weight_decay max_grad_norm, u64 step,
//!            per param: f32 first moment..., f32 second moment...
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn put_f32s(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

struct Input<R> {
    r: R,
}

impl<R: Read> Input<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 16 {
            return Err(Error::CorruptCheckpoint(format!("string length {n} is implausible")));
        }
        let mut b = vec![0u8; n];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        String::from_utf8(b).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut b = vec![0u8; n * 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, opt: Option<&OptimizerState>, config_hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION)?;
    put_str(&mut w, config_hash)?;
    put_u32(&mut w, params.len() as u32)?;
    for (_, p) in params.iter() {
        put_str(&mut w, &p.name)?;
        w.write_all(&[match p.group {
            ParamGroup::Retrieval => 0u8,
            ParamGroup::Other => 1u8,
        }])?;
        put_u32(&mut w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            put_u64(&mut w, d as u64)?;
        }
        put_f32s(&mut w, p.value.data())?;
    }
    w.write_all(&[u8::from(opt.is_some())])?;
    if let Some(o) = opt {
        let c = o.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.max_grad_norm] {
            put_f64(&mut w, v)?;
        }
        put_u64(&mut w, o.step)?;
        for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
            put_f32s(&mut w, m.data())?;
            put_f32s(&mut w, v.data())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = Input {
        r: BufReader::new(File::open(path)?),
    };
    if input.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = input.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let config_hash = input.string()?;
    let count = input.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = input.string()?;
        let group = match input.bytes::<1>()?[0] {
            0 => ParamGroup::Retrieval,
            1 => ParamGroup::Other,
            g => return Err(Error::CorruptCheckpoint(format!("unknown group tag {g} for `{name}`"))),
        };
        let ndim = input.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptCheckpoint(format!("`{name}` has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(input.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = input.f32s(n)?;
        let value = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        params.add(name, group, value);
    }
    let optimizer = match input.bytes::<1>()?[0] {
        0 => None,
        1 => {
            let mut f = [0.0f64; 6];
            for v in &mut f {
                *v = input.f64()?;
            }
            let config = AdamWConfig {
                lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
                weight_decay: f[4],
                max_grad_norm: f[5],
            };
            let step = input.u64()?;
            let mut first_moment = Vec::with_capacity(count);
            let mut second_moment = Vec::with_capacity(count);
            for (_, p) in params.iter() {
                let shape = p.value.shape().to_vec();
                let n = p.value.len();
                first_moment.push(Tensor::new(shape.clone(), input.f32s(n)?)?);
                second_moment.push(Tensor::new(shape, input.f32s(n)?)?);
            }
            Some(OptimizerState {
                config,
                step,
                first_moment,
                second_moment,
            })
        }
        t => return Err(Error::CorruptCheckpoint(format!("bad optimizer flag {t}"))),
    };
    let mut rest = Vec::new();
    input.r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        config_hash,
        params,
        optimizer,
    })
}
