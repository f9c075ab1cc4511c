//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSMOCR"  u16 version  u8 kind
//! str config-echo
//! u32 n  n × u32 vocabulary code points
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u64 step
//! u32 n  n × (str key, str value)          metadata
//! u32 n  n × (str name, u8 dtype, u8 rank, rank × u64 dims, payload)
//! [u8; 32] sha256 of everything above
//! ```
//!
//! Strings are `u32` length plus UTF-8 bytes. Nothing time-dependent is
//! written, so identical training runs give identical files.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{model_config_text, parse_model_config};
use crate::decoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind, OcrModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 6] = b"SSMOCR";
pub const VERSION: u16 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn from_tensor<T: Float>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.byte_size());
        t.data().iter().for_each(|v| v.write_le(&mut payload));
        TensorRecord { name: name.into(), dtype: T::DTYPE, dims: t.shape().to_vec(), payload }
    }

    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size_of();
        let data: Vec<T> = self
            .payload
            .chunks_exact(size)
            .map(|c| match self.dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        Tensor::new(self.dims.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vec<char>,
    pub rng: RngState,
    pub step: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
}

fn kind_code(k: ModelKind) -> u8 {
    ModelKind::ALL.iter().position(|&x| x == k).unwrap() as u8
}

impl Checkpoint {
    pub fn capture<T: Float>(
        model: &OcrModel<T>,
        opt: Option<&AdamW<T>>,
        rng: RngState,
        step: u64,
        mut meta: Vec<(String, String)>,
    ) -> Self {
        let mut tensors: Vec<TensorRecord> =
            model.store.params().iter().map(|p| TensorRecord::from_tensor(p.name.clone(), &p.value)).collect();
        if let Some(opt) = opt {
            for (i, p) in model.store.params().iter().enumerate() {
                tensors.push(TensorRecord::from_tensor(format!("{ADAM_M}{}", p.name), &opt.m[i]));
                tensors.push(TensorRecord::from_tensor(format!("{ADAM_V}{}", p.name), &opt.v[i]));
            }
            meta.push((ADAM_STEP.into(), opt.step.to_string()));
        }
        Checkpoint { model: model.cfg.clone(), vocab: model.vocab.chars().to_vec(), rng, step, meta, tensors }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|r| r.name == name)
    }

    fn load_into<T: Float>(&self, name: &str, expect: &[usize]) -> Result<Tensor<T>> {
        let r = self.record(name).ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        if r.dims != expect {
            return Err(Error::CheckpointMismatch(format!("{name}: shape {:?}, model expects {expect:?}", r.dims)));
        }
        r.to_tensor()
    }

    /// Rebuilds the model. Every parameter must be present with the shape
    /// the stored configuration implies.
    pub fn restore_model<T: Float>(&self) -> Result<OcrModel<T>> {
        let vocab = Vocabulary::new(self.vocab.iter().copied())?;
        let mut model = OcrModel::<T>::new(self.model.clone(), vocab, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let p = &model.store.params()[id.index()];
            let t = self.load_into(&p.name.clone(), p.value.shape())?;
            model.store.set(id, t)?;
        }
        let known = |n: &str| {
            let base = n.strip_prefix(ADAM_M).or_else(|| n.strip_prefix(ADAM_V)).unwrap_or(n);
            model.store.find(base).is_some()
        };
        if let Some(r) = self.tensors.iter().find(|r| !known(&r.name)) {
            return Err(Error::CheckpointMismatch(format!("unexpected tensor {}", r.name)));
        }
        Ok(model)
    }

    /// Optimizer moments, or `None` when the checkpoint carries none.
    pub fn restore_optimizer<T: Float>(&self, cfg: AdamWConfig, model: &OcrModel<T>) -> Result<Option<AdamW<T>>> {
        let Some(step) = self.meta(ADAM_STEP) else { return Ok(None) };
        let step = step.parse().map_err(|_| Error::Integrity(format!("bad {ADAM_STEP} {step:?}")))?;
        let mut opt = AdamW::new(cfg, &model.store);
        opt.step = step;
        for (i, p) in model.store.params().iter().enumerate() {
            opt.m[i] = self.load_into(&format!("{ADAM_M}{}", p.name), p.value.shape())?;
            opt.v[i] = self.load_into(&format!("{ADAM_V}{}", p.name), p.value.shape())?;
        }
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.0.push(kind_code(self.model.kind));
        w.str(&model_config_text(&self.model));
        w.u32(self.vocab.len() as u32);
        self.vocab.iter().for_each(|&c| w.u32(c as u32));
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.step);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.0.push(t.dtype.code());
            w.0.push(t.dims.len() as u8);
            t.dims.iter().for_each(|&d| w.u64(d as u64));
            w.0.extend_from_slice(&t.payload);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("missing SSMOCR magic".into()));
        }
        if bytes.len() < MAGIC.len() + 2 + 32 {
            return Err(Error::Integrity("truncated file".into()));
        }
        let version = u16::from_le_bytes([bytes[6], bytes[7]]);
        if version != VERSION {
            return Err(Error::UpgradeRequired { found: version, expected: VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let kind = r.u8()?;
        let model = parse_model_config(&r.str()?).map_err(|e| Error::Integrity(format!("config echo: {e}")))?;
        if kind_code(model.kind) != kind {
            return Err(Error::Integrity("model kind disagrees with config echo".into()));
        }
        let n = r.u32()? as usize;
        let vocab = (0..n)
            .map(|_| r.u32().and_then(|c| char::from_u32(c).ok_or_else(|| Error::Integrity("bad code point".into()))))
            .collect::<Result<_>>()?;
        let seed = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let meta = (0..n).map(|_| Ok((r.str()?, r.str()?))).collect::<Result<_>>()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Integrity(format!("{name}: unknown dtype")))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = count
                .and_then(|c| c.checked_mul(dtype.size_of()))
                .ok_or_else(|| Error::Integrity(format!("{name}: dims overflow")))?;
            let payload = r.take(len)?.to_vec();
            tensors.push(TensorRecord { name, dtype, dims, payload });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes".into()));
        }
        Ok(Checkpoint { model, vocab, rng: RngState { seed, stream, word_pos }, step, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8".into()))
    }
}
