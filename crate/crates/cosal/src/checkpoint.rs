//! Checkpoint container: model config, ablation switches, training
//! hyperparameters, all parameters, Adam moments, RNG state, and the episode
//! counter. Every tensor payload carries a CRC32 so corruption is caught at
//! load time with the tensor's name. Writes are atomic (temp file + rename)
//! and a load→save round trip is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{CosalError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// IEEE CRC32, table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    !c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_gam: bool,
    pub use_gcm: bool,
    pub use_acm: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_gam: true, use_gcm: true, use_acm: true }
    }
}

/// Adam moments aligned with the parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamMoments<S: Scalar> {
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamMoments<S> {
    pub fn zeros_for(params: &ModelParams<S>) -> Self {
        let mut m = Vec::new();
        params.visit(|_, t| m.push(t.zeros_like()));
        Self { t: 0, m: m.clone(), v: m }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub lr: f64,
    pub lambdas: [f64; 3],
    pub k: u64,
    pub epochs: u64,
    pub seed: u64,
    pub episode: u64,
    pub rng_words: [u64; 6],
    pub params: ModelParams<S>,
    pub adam: AdamMoments<S>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    let mut blob = Vec::new();
    t.write_to(&mut blob).expect("in-memory write");
    put_u64(out, blob.len() as u64);
    put_u32(out, crc32(&blob));
    out.extend_from_slice(&blob);
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: String,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| CosalError::format(&self.path, "truncated checkpoint"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor<S: Scalar>(&mut self) -> Result<(String, Tensor<S>)> {
        let name_len = self.u32()? as usize;
        if name_len > 4096 {
            return Err(CosalError::format(&self.path, "implausible tensor name length"));
        }
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| CosalError::format(&self.path, "bad tensor name"))?;
        let blob_len = self.u64()? as usize;
        let crc = self.u32()?;
        let blob = self.bytes(blob_len)?;
        if crc32(&blob) != crc {
            return Err(CosalError::format(
                &self.path,
                format!("CRC mismatch in tensor {name}"),
            ));
        }
        let t = Tensor::read_from(&mut Cursor::new(&blob))?;
        Ok((name, t))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for v in [
            self.config.input_size,
            self.config.base_channels,
            self.config.levels,
            self.config.embed_channels,
            self.config.num_classes,
        ] {
            put_u64(&mut out, v as u64);
        }
        out.push(self.flags.use_gam as u8);
        out.push(self.flags.use_gcm as u8);
        out.push(self.flags.use_acm as u8);
        put_f64(&mut out, self.lr);
        for l in self.lambdas {
            put_f64(&mut out, l);
        }
        for v in [self.k, self.epochs, self.seed, self.episode, self.adam.t] {
            put_u64(&mut out, v);
        }
        for w in self.rng_words {
            put_u64(&mut out, w);
        }
        let named = self.params.named();
        put_u32(&mut out, named.len() as u32);
        for (i, (name, t)) in named.iter().enumerate() {
            put_tensor(&mut out, name, t);
            put_tensor(&mut out, &format!("m:{name}"), &self.adam.m[i]);
            put_tensor(&mut out, &format!("v:{name}"), &self.adam.v[i]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { cur: Cursor::new(bytes), path: path.to_string() };
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(CosalError::format(path, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CosalError::format(path, format!("unsupported version {version}")));
        }
        let config = ModelConfig {
            input_size: r.u64()? as usize,
            base_channels: r.u64()? as usize,
            levels: r.u64()? as usize,
            embed_channels: r.u64()? as usize,
            num_classes: r.u64()? as usize,
        };
        config.validate()?;
        let flag = |r: &mut Reader| -> Result<bool> { Ok(r.bytes(1)?[0] != 0) };
        let flags = AblationFlags {
            use_gam: flag(&mut r)?,
            use_gcm: flag(&mut r)?,
            use_acm: flag(&mut r)?,
        };
        let lr = r.f64()?;
        let lambdas = [r.f64()?, r.f64()?, r.f64()?];
        let (k, epochs, seed, episode, adam_t) =
            (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let mut rng_words = [0u64; 6];
        for w in &mut rng_words {
            *w = r.u64()?;
        }
        let count = r.u32()? as usize;
        let mut map: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        for _ in 0..count * 3 {
            let (name, t) = r.tensor()?;
            if map.insert(name.clone(), t).is_some() {
                return Err(CosalError::format(path, format!("duplicate tensor {name}")));
            }
        }
        if r.cur.position() != bytes.len() as u64 {
            return Err(CosalError::format(path, "trailing bytes after checkpoint payload"));
        }
        // rebuild the parameter structure from the stored tensors
        let mut params: ModelParams<S> = crate::model::init_params(&config, 0)?;
        let mut missing = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.visit_mut(|name, slot| {
            let mut take = |key: String, dst: &mut Tensor<S>| match map.remove(&key) {
                Some(t) if t.shape == dst.shape => *dst = t,
                Some(_) => missing.push(format!("{key} (shape mismatch)")),
                None => missing.push(key),
            };
            take(name.to_string(), slot);
            let mut mm = slot.zeros_like();
            let mut vv = slot.zeros_like();
            take(format!("m:{name}"), &mut mm);
            take(format!("v:{name}"), &mut vv);
            m.push(mm);
            v.push(vv);
        });
        if !missing.is_empty() {
            return Err(CosalError::format(path, format!("bad tensors: {}", missing.join(", "))));
        }
        if !map.is_empty() {
            let extra: Vec<String> = map.keys().cloned().collect();
            return Err(CosalError::format(path, format!("unknown tensors: {}", extra.join(", "))));
        }
        Ok(Checkpoint {
            config,
            flags,
            lr,
            lambdas,
            k,
            epochs,
            seed,
            episode,
            rng_words,
            params,
            adam: AdamMoments { t: adam_t, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("gckp.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| CosalError::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| CosalError::io(&tmp, e))?;
            f.sync_all().map_err(|e| CosalError::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| CosalError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CosalError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
