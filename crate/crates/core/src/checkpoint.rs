//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GMMC" | version u32 | payload | crc32(payload) u32
//! payload:
//!   input_dim u32 | n_layers u32 | widths u32 * n | activation codes u8 * (n-1)
//!   init_seed u64 | n_params u64 | params f64 * n_params
//!   centroid flag u8 [C u32 | d u32 | S f64 | means f64 * C*d]
//!   gamma2 flag u8 [gamma2 f64]
//!   buffer flag u8 [capacity u64 | dim u32 | rho f64 | seed u64 | word_pos u128
//!                   | len u64 | (label u32 | x f64 * dim) * len]
//! ```

use std::fs;
use std::path::Path;

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::model::GmmcModel;
use crate::net::{Activation, Network, NetworkSpec, ParameterVector};
use crate::sampler::ReplayBuffer;

pub const MAGIC: &[u8; 4] = b"GMMC";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub centroids: Option<CentroidSet>,
    pub gamma2: Option<f64>,
    pub buffer: Option<ReplayBuffer>,
}

impl Checkpoint {
    pub fn from_network(net: Network) -> Self {
        Checkpoint {
            net,
            centroids: None,
            gamma2: None,
            buffer: None,
        }
    }

    pub fn from_model(model: &GmmcModel, buffer: Option<&ReplayBuffer>) -> Self {
        Checkpoint {
            net: model.net().clone(),
            centroids: Some(model.centroids().clone()),
            gamma2: model.gamma2(),
            buffer: buffer.cloned(),
        }
    }

    /// The classifier stored in this checkpoint.
    pub fn model(&self) -> Result<GmmcModel> {
        let centroids = self.centroids.clone().ok_or_else(|| {
            Error::Format("checkpoint holds a bare network without centroids".into())
        })?;
        let m = GmmcModel::new(self.net.clone(), centroids)?;
        match self.gamma2 {
            Some(g) => m.with_gamma2(g),
            None => Ok(m),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::new();
        let spec = self.net.spec();
        put_u32(&mut p, spec.input_dim() as u32);
        put_u32(&mut p, spec.widths().len() as u32);
        for &w in spec.widths() {
            put_u32(&mut p, w as u32);
        }
        for a in spec.activations() {
            p.push(a.code());
        }
        p.extend_from_slice(&spec.init_seed().to_le_bytes());
        let params = self.net.params().as_slice();
        p.extend_from_slice(&(params.len() as u64).to_le_bytes());
        put_f64s(&mut p, params);

        match &self.centroids {
            None => p.push(0),
            Some(cs) => {
                p.push(1);
                put_u32(&mut p, cs.num_classes() as u32);
                put_u32(&mut p, cs.feature_dim() as u32);
                put_f64s(&mut p, &[cs.scale()]);
                for mu in cs.means() {
                    put_f64s(&mut p, mu);
                }
            }
        }
        match self.gamma2 {
            None => p.push(0),
            Some(g) => {
                p.push(1);
                put_f64s(&mut p, &[g]);
            }
        }
        match &self.buffer {
            None => p.push(0),
            Some(b) => {
                p.push(1);
                p.extend_from_slice(&(b.capacity() as u64).to_le_bytes());
                put_u32(&mut p, b.dim() as u32);
                put_f64s(&mut p, &[b.reinit_prob()]);
                p.extend_from_slice(&b.seed().to_le_bytes());
                p.extend_from_slice(&b.rng_word_pos().to_le_bytes());
                p.extend_from_slice(&(b.len() as u64).to_le_bytes());
                for (x, y) in b.entries() {
                    put_u32(&mut p, y as u32);
                    put_f64s(&mut p, x);
                }
            }
        }

        let mut out = Vec::with_capacity(p.len() + 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let payload = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: payload,
            pos: 0,
        };

        let input_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let widths = (0..n_layers)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let activations = (0..n_layers.saturating_sub(1))
            .map(|_| {
                let c = r.u8()?;
                Activation::from_code(c)
                    .ok_or_else(|| Error::Format(format!("unknown activation code {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let seed = r.u64()?;
        let spec = NetworkSpec::new(input_dim, widths, activations, seed)
            .map_err(|e| Error::Format(format!("invalid network spec: {e}")))?;
        let n_params = r.u64()? as usize;
        if n_params != spec.num_params() {
            return Err(Error::Format(format!(
                "parameter count {n_params} does not match spec ({})",
                spec.num_params()
            )));
        }
        let values = r.f64s(n_params)?;
        let params = ParameterVector::from_values(&spec, values)?;
        let net = Network::new(spec, params)?;

        let centroids = match r.flag()? {
            false => None,
            true => {
                let c = r.u32()? as usize;
                let d = r.u32()? as usize;
                let scale = r.f64()?;
                let means = (0..c).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
                Some(CentroidSet::from_means(scale, means)?)
            }
        };
        let gamma2 = match r.flag()? {
            false => None,
            true => Some(r.f64()?),
        };
        let buffer = match r.flag()? {
            false => None,
            true => {
                let capacity = r.u64()? as usize;
                let dim = r.u32()? as usize;
                let rho = r.f64()?;
                let seed = r.u64()?;
                let word_pos = r.u128()?;
                let len = r.u64()? as usize;
                if len > capacity {
                    return Err(Error::Format(
                        "buffer holds more entries than its capacity".into(),
                    ));
                }
                let mut entries = Vec::with_capacity(len);
                for _ in 0..len {
                    let y = r.u32()? as usize;
                    entries.push((r.f64s(dim)?, y));
                }
                Some(ReplayBuffer::restore(
                    capacity, dim, rho, seed, word_pos, entries,
                )?)
            }
        };
        if r.pos != payload.len() {
            return Err(Error::Format(
                "trailing bytes after checkpoint payload".into(),
            ));
        }
        let ckpt = Checkpoint {
            net,
            centroids,
            gamma2,
            buffer,
        };
        if ckpt.centroids.is_some() {
            ckpt.model()?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            f => Err(Error::Format(format!("invalid block flag {f}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
