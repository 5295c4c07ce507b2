//! Checkpoint container.
//!
//! Layout, little-endian throughout:
//! `SDIT`, version (u32), dtype tag (u8), config text length (u32) and the
//! config as sorted `key = value` lines, parameter count (u32), then per
//! parameter: name length (u32), name, dtype tag (u8), rank (u32), dims
//! (u32 each), values. An optimizer section (flag u8; hyperparameters as f64,
//! step u64, first then second moments), an RNG section (flag u8; seed,
//! stream u64, word position u128), the training step (u64), and a CRC32 of
//! everything before it close the file.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{AdamConfig, AdamW, NoiseSchedule, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SditModel};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDIT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: ModelConfig,
    /// Parameters in model order.
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<AdamW<T>>,
    pub rng: Option<RngState>,
    pub step: u64,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &SditModel<T>) -> Self {
        Self {
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: None,
            rng: None,
            step: 0,
        }
    }

    pub fn from_trainer(tr: &Trainer<T>) -> Self {
        Self {
            optimizer: Some(tr.opt.clone()),
            rng: Some(RngState::capture(&tr.rng)),
            step: tr.step,
            ..Self::from_model(&tr.model)
        }
    }

    /// Rebuilds the model; every stored name must match a model parameter.
    pub fn to_model(&self) -> Result<SditModel<T>> {
        let mut model = SditModel::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if model.params.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter '{name}'")))?;
            model.params.set(id, value.clone())?;
        }
        Ok(model)
    }

    /// Resumes training where the checkpoint left off.
    pub fn to_trainer(&self, schedule: NoiseSchedule, adam: AdamConfig, batch_size: usize) -> Result<Trainer<T>> {
        let mut tr = Trainer::new(self.to_model()?, schedule, adam, batch_size, 0)?;
        if let Some(opt) = &self.optimizer {
            tr.opt = opt.clone();
        }
        if let Some(rng) = &self.rng {
            tr.rng = rng.restore();
        }
        tr.step = self.step;
        Ok(tr)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.push(T::DTYPE);
        let text = self.config.to_string();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());

        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_values(&mut out, t);
        }

        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let c = opt.config;
                for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    put_values(&mut out, t);
                }
            }
        }
        match &self.rng {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.seed);
                out.extend_from_slice(&s.stream.to_le_bytes());
                out.extend_from_slice(&s.word_pos.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses a container; with `expected`, the stored config must equal it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        if bytes.len() < 13 {
            return Err(Error::TruncatedFile {
                expected: 13,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint",
                found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut rd = Reader { bytes: body, pos: 8 };
        let dtype = rd.u8()?;
        if dtype != T::DTYPE {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds dtype tag {dtype}, expected {} ({})",
                T::DTYPE,
                T::NAME
            )));
        }
        let text_len = rd.u32()? as usize;
        let text = std::str::from_utf8(rd.take(text_len)?)
            .map_err(|_| Error::Malformed("config text is not UTF-8".into()))?;
        let config = parse_config(text)?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::ConfigMismatch(config_diff(exp, &config)));
            }
        }

        let count = rd.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(len)?.to_vec())
                .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?;
            if rd.u8()? != T::DTYPE {
                return Err(Error::Malformed(format!("parameter '{name}' has a different dtype")));
            }
            let rank = rd.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let t = rd.values(&shape)?;
            params.push((name, t));
        }

        let optimizer = match rd.u8()? {
            0 => None,
            1 => {
                let mut h = [0.0; 5];
                for x in &mut h {
                    *x = rd.f64()?;
                }
                let step = rd.u64()?;
                let mut moments = Vec::with_capacity(2 * count);
                for i in 0..2 * count {
                    moments.push(rd.values(params[i % count].1.shape())?);
                }
                let v = moments.split_off(count);
                Some(AdamW {
                    config: AdamConfig {
                        lr: h[0],
                        beta1: h[1],
                        beta2: h[2],
                        eps: h[3],
                        weight_decay: h[4],
                    },
                    step,
                    m: moments,
                    v,
                })
            }
            f => return Err(Error::Malformed(format!("optimizer flag {f}"))),
        };
        let rng = match rd.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = rd.take(32)?.try_into().expect("32 bytes");
                let stream = rd.u64()?;
                let word_pos = u128::from_le_bytes(rd.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(Error::Malformed(format!("rng flag {f}"))),
        };
        let step = rd.u64()?;
        if rd.pos != body.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", body.len() - rd.pos)));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            rng,
            step,
        })
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, expected)
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Malformed(format!("config line '{line}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    ModelConfig::from_kv(&map).map_err(|e| Error::Malformed(e.to_string()))
}

fn config_diff(want: &ModelConfig, got: &ModelConfig) -> String {
    let (a, b) = (want.to_kv(), got.to_kv());
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: model {v}, checkpoint {}", b[k]))
        .collect::<Vec<_>>()
        .join("; ")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("record overruns the file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn values<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * T::BYTES)?;
        Tensor::new(shape, bytes.chunks(T::BYTES).map(T::read_le).collect())
            .map_err(|e| Error::Malformed(e.to_string()))
    }
}
