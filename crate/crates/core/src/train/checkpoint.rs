//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "MSTR" | version u32
//! generator config: 10 × u32 (local_dim, global_embed_dim, global_out_dim,
//!     local_heads, global_heads, num_local_layers, train_height,
//!     train_width, fusion_channels, variant)
//! record count u32, then per record:
//!     name_len u32 | name utf-8 | ndim u32 | dims u64… | data f64…
//! train-state flag u8, and when 1:
//!     step u64 | rng seed [32] | stream u64 | word_pos u128
//!     loss weights 5 × f64 | last_loss f64 | best_loss f64   (NaN = none)
//!     three optimizer states (generator, global D, local D):
//!         t u64 | tensor count u32 | per tensor: len u64, m f64…, v f64…
//! ```
//!
//! Record names carry a `g.`, `d_global.` or `d_local.` prefix.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Variant};
use crate::losses::LossWeights;
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::adam::AdamState;
use super::state::{RngState, TrainState};

pub const MAGIC: &[u8; 4] = b"MSTR";
pub const VERSION: u32 = 1;

const PREFIXES: [&str; 3] = ["g.", "d_global.", "d_local."];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: GeneratorConfig,
    pub generator: ParamStore,
    pub d_global: ParamStore,
    pub d_local: ParamStore,
    pub train_state: Option<TrainState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.0.reserve(v.len() * 8);
        for &x in v {
            self.f64(x);
        }
    }
    fn len32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset: self.pos,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!(
                "truncated reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn usize32(&mut self, what: &str) -> Result<usize> {
        self.u32(what).map(|v| v as usize)
    }
    fn usize64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint {
            offset: at,
            detail: format!("{what} {v} does not fit in memory"),
        })
    }
}

fn config_fields(c: &GeneratorConfig) -> [u32; 10] {
    let n = |v: usize| u32::try_from(v).expect("config value fits in u32");
    [
        n(c.local_dim),
        n(c.global_embed_dim),
        n(c.global_out_dim),
        n(c.local_heads),
        n(c.global_heads),
        n(c.num_local_layers),
        n(c.train_height),
        n(c.train_width),
        n(c.fusion_channels),
        c.variant.code(),
    ]
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn unopt(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        for f in config_fields(&self.config) {
            w.u32(f);
        }
        let stores = [&self.generator, &self.d_global, &self.d_local];
        w.len32(stores.iter().map(|s| s.len()).sum());
        for (prefix, store) in PREFIXES.iter().zip(stores) {
            for (name, t) in store.iter() {
                let full = format!("{prefix}{name}");
                w.len32(full.len());
                w.0.extend_from_slice(full.as_bytes());
                w.len32(t.ndim());
                for &d in t.shape() {
                    w.u64(d as u64);
                }
                w.f64s(t.data());
            }
        }
        match &self.train_state {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.step);
                w.0.extend_from_slice(&s.rng.seed);
                w.u64(s.rng.stream);
                w.0.extend_from_slice(&s.rng.word_pos.to_le_bytes());
                for (_, v) in s.weights.named() {
                    w.f64(v);
                }
                w.f64(opt(s.last_loss));
                w.f64(opt(s.best_loss));
                for a in [&s.adam_g, &s.adam_d_global, &s.adam_d_local] {
                    w.u64(a.t);
                    w.len32(a.m.len());
                    for (m, v) in a.m.iter().zip(&a.v) {
                        w.u64(m.len() as u64);
                        w.f64s(m);
                        w.f64s(v);
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            r.pos = 0;
            return r.fail("bad magic, not an MSTR checkpoint");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            r.pos -= 4;
            return r.fail(format!("unsupported format version {version} (expected {VERSION})"));
        }
        let mut f = [0usize; 10];
        for v in &mut f {
            *v = r.usize32("generator config")?;
        }
        let variant = Variant::from_code(f[9] as u32).or_else(|e| {
            r.pos -= 4;
            r.fail(e.to_string())
        })?;
        let config = GeneratorConfig {
            local_dim: f[0],
            global_embed_dim: f[1],
            global_out_dim: f[2],
            local_heads: f[3],
            global_heads: f[4],
            num_local_layers: f[5],
            train_height: f[6],
            train_width: f[7],
            fusion_channels: f[8],
            variant,
        };
        if let Err(e) = config.validate() {
            return r.fail(e.to_string());
        }

        let count = r.usize32("record count")?;
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for _ in 0..count {
            let at = r.pos;
            let len = r.usize32("name length")?;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Checkpoint {
                offset: at,
                detail: "record name is not utf-8".into(),
            })?;
            let Some((slot, rest)) = PREFIXES
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|rest| (i, rest)))
            else {
                r.pos = at;
                return r.fail(format!("record `{name}` has no known owner prefix"));
            };
            let rest = rest.to_owned();
            let ndim = r.usize32("ndim")?;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.usize64("dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 || ndim == 0)
                .ok_or_else(|| Error::Checkpoint {
                    offset: r.pos,
                    detail: format!("record `{rest}` has invalid shape {shape:?}"),
                })?;
            let data = r.f64s(numel, "tensor data")?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
                offset: r.pos,
                detail: e.to_string(),
            })?;
            if stores[slot].find(&rest).is_some() {
                r.pos = at;
                return r.fail(format!("duplicate record `{name}`"));
            }
            stores[slot].add(rest, t);
        }

        let train_state = match r.u8("train-state flag")? {
            0 => None,
            1 => Some(read_state(&mut r, &stores)?),
            other => {
                r.pos -= 1;
                return r.fail(format!("train-state flag {other} is neither 0 nor 1"));
            }
        };
        if r.pos != bytes.len() {
            return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let [generator, d_global, d_local] = stores;
        Ok(Self {
            config,
            generator,
            d_global,
            d_local,
            train_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_state(r: &mut Reader<'_>, stores: &[ParamStore; 3]) -> Result<TrainState> {
    let step = r.u64("step")?;
    let seed = r.array::<32>("rng seed")?;
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.array("rng word position")?);
    let mut w = [0.0; 5];
    for v in &mut w {
        *v = r.f64("loss weight")?;
    }
    let weights = LossWeights {
        adv_global: w[0],
        adv_local: w[1],
        sfp: w[2],
        identity: w[3],
        luminance: w[4],
    };
    let last_loss = unopt(r.f64("last loss")?);
    let best_loss = unopt(r.f64("best loss")?);
    let mut adams = Vec::with_capacity(3);
    for store in stores {
        let t = r.u64("optimizer step")?;
        let at = r.pos;
        let n = r.usize32("moment count")?;
        let mut a = AdamState {
            t,
            m: Vec::with_capacity(n.min(4096)),
            v: Vec::with_capacity(n.min(4096)),
        };
        for _ in 0..n {
            let len = r.usize64("moment length")?;
            a.m.push(r.f64s(len, "first moment")?);
            a.v.push(r.f64s(len, "second moment")?);
        }
        if !a.mirrors(store) {
            r.pos = at;
            return r.fail("optimizer moments do not mirror the parameter shapes");
        }
        adams.push(a);
    }
    let [adam_g, adam_d_global, adam_d_local] = <[AdamState; 3]>::try_from(adams).expect("three states");
    Ok(TrainState {
        step,
        adam_g,
        adam_d_global,
        adam_d_local,
        rng: RngState { seed, stream, word_pos },
        weights,
        last_loss,
        best_loss,
    })
}
