//! Versioned binary checkpoint: model configuration plus every named tensor,
//! running batch-norm statistics included.
//!
//! Layout (little-endian): magic `TMUNETCK`, `u32` version, `u8` dtype tag,
//! `u32` length + UTF-8 model config, `u32` tensor count, then per tensor
//! `u16` name length + name, `u8` trainable flag, `u8` rank, `u64` extents
//! and the raw values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::{model_text, parse_model_text};
use crate::model::{ModelConfig, TmUnet};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TMUNETCK";
pub const VERSION: u32 = 1;

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn encode<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    let text = model_text(cfg);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return fmt_err("checkpoint truncated");
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).or_else(|_| fmt_err("checkpoint string is not UTF-8"))
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    /// `(name, trainable, value)` in store order.
    pub tensors: Vec<(String, bool, Tensor<T>)>,
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return fmt_err("not a checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        return fmt_err(format!("checkpoint version {version}, expected {VERSION}"));
    }
    let tag = r.u8()?;
    match DType::from_tag(tag) {
        Some(d) if d == T::DTYPE => {}
        Some(d) => return fmt_err(format!("checkpoint holds {d:?}, requested {:?}", T::DTYPE)),
        None => return fmt_err(format!("unknown dtype tag {tag}")),
    }
    let n = r.u32()? as usize;
    let model = parse_model_text(r.str(n)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.str(n)?.to_string();
        let trainable = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes) = numel.and_then(|n| n.checked_mul(T::BYTES)) else {
            return fmt_err(format!("tensor `{name}` is too large"));
        };
        let raw = r.take(bytes)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push((name, trainable, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return fmt_err("trailing bytes after checkpoint");
    }
    Ok(Checkpoint { model, tensors })
}

pub fn save<T: Scalar>(path: &Path, cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    Ok(std::fs::write(path, encode(cfg, store))?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}

impl<T: Scalar> Checkpoint<T> {
    /// Builds the network described by the checkpoint and fills in every
    /// stored tensor. Names and shapes must match exactly.
    pub fn restore(&self) -> Result<(TmUnet, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let model = TmUnet::new(&mut store, &self.model, &mut rng)?;
        if store.len() != self.tensors.len() {
            return fmt_err(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            ));
        }
        for (name, _, value) in &self.tensors {
            let Some(id) = store.find(name) else {
                return fmt_err(format!(
                    "checkpoint tensor `{name}` has no slot in the model"
                ));
            };
            store.set_value(id, value.clone())?;
        }
        Ok((model, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;
    use crate::nn::{Mode, Session};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::preset(Preset::Tiny);
        let mut store = ParamStore::<f32>::new();
        let model = TmUnet::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // One train-mode pass so running statistics are non-trivial.
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        {
            let mut s = Session::new(&mut store, Mode::Train);
            let xv = s.input(x.clone());
            model.forward(&mut s, xv).unwrap();
        }
        let bytes = encode(&cfg, &store);
        let ck = decode::<f32>(&bytes).unwrap();
        assert_eq!(ck.model, cfg);
        let (model2, mut store2) = ck.restore().unwrap();
        assert_eq!(encode(&cfg, &store2), bytes);
        for (a, b) in store.iter().zip(store2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{}", a.name);
        }
        let out = |m: &TmUnet, st: &mut ParamStore<f32>| {
            let mut s = Session::new(st, Mode::Eval);
            let xv = s.input(x.clone());
            let y = m.forward(&mut s, xv).unwrap();
            s.value(y).clone()
        };
        assert_eq!(out(&model, &mut store), out(&model2, &mut store2));
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::preset(Preset::Tiny);
        let mut store = ParamStore::<f64>::new();
        TmUnet::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = encode(&cfg, &store);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
    }
}
