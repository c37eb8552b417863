//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `RRDCKPT\n`, a little-endian `u32` version, then
//! a fixed sequence of sections, each a 4-byte tag, a `u64` payload length
//! and the payload. All integers are little-endian `u64` unless noted and all
//! floats are little-endian IEEE-754 doubles.
//!
//! | tag    | payload                                                           |
//! |--------|-------------------------------------------------------------------|
//! | `ARCH` | model spec as JSON                                                |
//! | `PARM` | count, then per tensor: name, rows, cols, values                  |
//! | `OPTM` | count, then per buffer: length, values (SGD velocity)             |
//! | `BANK` | `u8` presence flag, then capacity, dim, cursor, total enqueued,   |
//! |        | `u8` strategy (0 FIFO, 1 momentum), α, slot-order storage         |
//! | `CONF` | config snapshot as JSON (may be empty)                            |
//! | `EPOC` | completed epochs                                                  |
//! | `SEED` | init, shuffle and bank seeds                                      |
//!
//! Strings are a `u64` byte length followed by UTF-8 bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::memory_bank::{MemoryBank, UpdateStrategy};
use crate::nn::{Model, ModelSpec};

use super::config::Seeds;

pub const MAGIC: &[u8; 8] = b"RRDCKPT\n";
pub const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&[u8; 4]; 7] = [b"ARCH", b"PARM", b"OPTM", b"BANK", b"CONF", b"EPOC", b"SEED"];

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParameter {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub parameters: Vec<NamedParameter>,
    /// SGD velocity, aligned with `parameters`; empty before the first step
    /// of a run that was never trained.
    pub velocity: Vec<Vec<f64>>,
    pub bank: Option<MemoryBank>,
    /// JSON of the config that produced this checkpoint.
    pub config_json: String,
    pub epoch: usize,
    pub seeds: Seeds,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        velocity: Vec<Vec<f64>>,
        bank: Option<MemoryBank>,
        config_json: String,
        epoch: usize,
        seeds: Seeds,
    ) -> Self {
        let parameters = model
            .parameters()
            .into_iter()
            .map(|(name, t)| NamedParameter {
                name,
                shape: t.shape(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            spec: model.spec().clone(),
            parameters,
            velocity,
            bank,
            config_json,
            epoch,
            seeds,
        }
    }

    /// Rebuilds the stored model after checking it against the architecture
    /// the caller expects. The result is frozen.
    pub fn model(&self, expected: &ModelSpec) -> Result<Model> {
        if &self.spec != expected {
            return Err(Error::ArchitectureMismatch {
                expected: expected.to_string(),
                found: self.spec.to_string(),
            });
        }
        let template = Model::init(&self.spec, 0)?;
        for ((name, t), p) in template.parameters().iter().zip(&self.parameters) {
            if name != &p.name || t.shape() != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{name}` {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
        }
        let values: Vec<Vec<f64>> = self.parameters.iter().map(|p| p.values.clone()).collect();
        template.freeze().with_parameter_values(&values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut section = |tag: &[u8; 4], body: Enc| {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
            out.extend_from_slice(&body.0);
        };

        let mut e = Enc::default();
        e.str(&serde_json::to_string(&self.spec).expect("spec serializes"));
        section(b"ARCH", e);

        let mut e = Enc::default();
        e.u64(self.parameters.len() as u64);
        for p in &self.parameters {
            e.str(&p.name);
            e.u64(p.shape[0] as u64);
            e.u64(p.shape[1] as u64);
            e.f64s(&p.values);
        }
        section(b"PARM", e);

        let mut e = Enc::default();
        e.u64(self.velocity.len() as u64);
        for v in &self.velocity {
            e.u64(v.len() as u64);
            e.f64s(v);
        }
        section(b"OPTM", e);

        let mut e = Enc::default();
        match &self.bank {
            None => e.0.push(0),
            Some(b) => {
                e.0.push(1);
                e.u64(b.capacity() as u64);
                e.u64(b.dim() as u64);
                e.u64(b.write_cursor() as u64);
                e.u64(b.total_enqueued());
                match b.strategy() {
                    UpdateStrategy::Fifo => {
                        e.0.push(0);
                        e.f64s(&[0.0]);
                    }
                    UpdateStrategy::Momentum { alpha } => {
                        e.0.push(1);
                        e.f64s(&[alpha]);
                    }
                }
                e.f64s(b.storage());
            }
        }
        section(b"BANK", e);

        let mut e = Enc::default();
        e.str(&self.config_json);
        section(b"CONF", e);

        let mut e = Enc::default();
        e.u64(self.epoch as u64);
        section(b"EPOC", e);

        let mut e = Enc::default();
        e.u64(self.seeds.init);
        e.u64(self.seeds.shuffle);
        e.u64(self.seeds.bank);
        section(b"SEED", e);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Dec { buf: bytes, pos: 0 };
        if d.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(d.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut bodies = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let found = d.take(4)?;
            if found != tag {
                return Err(Error::Checkpoint(format!(
                    "expected section {}, found {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(found)
                )));
            }
            let len = d.len()?;
            bodies.push(Dec {
                buf: d.take(len)?,
                pos: 0,
            });
        }
        if d.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - d.pos)));
        }
        let [mut arch, mut parm, mut optm, mut bank_dec, mut conf, mut epoc, mut seed]: [Dec; 7] =
            bodies.try_into().map_err(|_| Error::Checkpoint("section count".into()))?;

        let spec: ModelSpec = serde_json::from_str(&arch.str()?)
            .map_err(|e| Error::Checkpoint(format!("architecture section: {e}")))?;
        spec.validate()?;

        let count = parm.len()?;
        let mut parameters = Vec::with_capacity(count);
        for _ in 0..count {
            let name = parm.str()?;
            let shape = [parm.len()?, parm.len()?];
            let values = parm.f64s(shape[0].checked_mul(shape[1]).ok_or_else(overflow)?)?;
            parameters.push(NamedParameter { name, shape, values });
        }

        let count = optm.len()?;
        let mut velocity = Vec::with_capacity(count);
        for _ in 0..count {
            let n = optm.len()?;
            velocity.push(optm.f64s(n)?);
        }

        let bank = match bank_dec.take(1)?[0] {
            0 => None,
            1 => {
                let (capacity, dim, cursor) = (bank_dec.len()?, bank_dec.len()?, bank_dec.len()?);
                let total = bank_dec.u64()?;
                let kind = bank_dec.take(1)?[0];
                let alpha = bank_dec.f64s(1)?[0];
                let strategy = match kind {
                    0 => UpdateStrategy::Fifo,
                    1 => UpdateStrategy::Momentum { alpha },
                    k => return Err(Error::Checkpoint(format!("unknown bank strategy {k}"))),
                };
                let storage = bank_dec.f64s(capacity.checked_mul(dim).ok_or_else(overflow)?)?;
                Some(MemoryBank::from_parts(capacity, dim, storage, strategy, cursor, total)?)
            }
            f => return Err(Error::Checkpoint(format!("bad bank flag {f}"))),
        };

        let config_json = conf.str()?;
        let epoch = epoc.len()?;
        let seeds = Seeds {
            init: seed.u64()?,
            shuffle: seed.u64()?,
            bank: seed.u64()?,
        };
        for (tag, body) in SECTIONS.iter().zip([&arch, &parm, &optm, &bank_dec, &conf, &epoc, &seed]) {
            if body.pos != body.buf.len() {
                return Err(Error::Checkpoint(format!(
                    "section {} has trailing bytes",
                    String::from_utf8_lossy(*tag)
                )));
            }
        }
        Ok(Self {
            spec,
            parameters,
            velocity,
            bank,
            config_json,
            epoch,
            seeds,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn overflow() -> Error {
    Error::Checkpoint("size field overflows".into())
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| overflow())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(overflow)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> (Model, Checkpoint) {
        let model = Model::init(&ModelSpec::new(&[2, 8], 3, 4), 11).unwrap();
        let velocity = model.parameter_values().iter().map(|v| vec![0.25; v.len()]).collect();
        let bank = MemoryBank::new(6, 4, UpdateStrategy::Momentum { alpha: 0.9 }, 2).unwrap();
        let ckpt = Checkpoint::from_model(&model, velocity, Some(bank), "{}".into(), 3, Seeds::all(9));
        (model, ckpt)
    }

    #[test]
    fn bytes_round_trip() {
        let (model, ckpt) = sample();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let x = Tensor::new(vec![0.3, -1.2, 2.0, 0.1], [2, 2]).unwrap();
        let a = model.forward(&x).unwrap();
        let b = back.model(model.spec()).unwrap().forward(&x).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.embedding.data(), b.embedding.data());
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let (_, ckpt) = sample();
        let bytes = ckpt.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        for cut in [4, 12, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn architecture_mismatch() {
        let (_, ckpt) = sample();
        let err = ckpt.model(&ModelSpec::new(&[2, 16], 3, 4)).unwrap_err();
        assert!(matches!(err, Error::ArchitectureMismatch { .. }));
    }
}
